#include "cloudflow/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "cloudflow/error.hpp"
#include "cloudflow/serialize.hpp"

namespace cloudflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'C', 'F', 'N'};

template <typename U>
void put(std::vector<char>& out, U value) {
    char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out.insert(out.end(), bytes, bytes + sizeof(U));
}

class Reader {
public:
    Reader(const std::vector<char>& buf, const fs::path& path) : buf_(buf), path_(path) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        char bytes[sizeof(U)];
        std::memcpy(bytes, buf_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
        pos_ += sizeof(U);
        U value;
        std::memcpy(&value, bytes, sizeof(U));
        return value;
    }

    std::string bytes(std::uint64_t n) {
        need(n);
        std::string s(buf_.data() + pos_, buf_.data() + pos_ + n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

    void need(std::uint64_t n) const {
        if (n > remaining())
            throw DataError("checkpoint " + path_.string() + " is truncated (needs " + std::to_string(n) +
                            " more bytes at offset " + std::to_string(pos_) + ")");
    }

private:
    const std::vector<char>& buf_;
    fs::path path_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_header(Reader& r, const fs::path& path) {
    const std::string magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kMagic))
        throw DataError("checkpoint " + path.string() + ": bad magic, not a checkpoint file");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError("checkpoint " + path.string() + ": unsupported format version " + std::to_string(version));
    const auto meta_len = r.get<std::uint64_t>();
    try {
        return json::parse(r.bytes(meta_len));
    } catch (const json::parse_error& e) {
        throw DataError("checkpoint " + path.string() + ": corrupt metadata: " + e.what());
    }
}

CheckpointInfo info_from_json(const json& meta, const fs::path& path) {
    CheckpointInfo info;
    try {
        info.config = model_config_from_json(meta.at("config"));
        if (meta.contains("norm_stats") && !meta.at("norm_stats").is_null())
            info.norm = norm_stats_from_json(meta.at("norm_stats"));
        info.dtype = storage_type_from_string(meta.at("dtype").get<std::string>());
        info.extra = meta.value("extra", json::object());
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path.string() + ": " + e.what());
    }
    return info;
}

}  // namespace

std::string to_string(StorageType t) { return t == StorageType::f32 ? "f32" : "f64"; }

StorageType storage_type_from_string(const std::string& s) {
    if (s == "f32") return StorageType::f32;
    if (s == "f64") return StorageType::f64;
    throw DataError("unknown storage dtype '" + s + "'");
}

template <typename T>
void save_checkpoint(const fs::path& path, const Model<T>& model, const std::optional<NormStats>& norm,
                     StorageType dtype, const json& extra) {
    json table = json::array();
    std::uint64_t scalars = 0;
    for (const auto& e : model.params.entries()) {
        table.push_back({{"name", e.name}, {"shape", e.tensor.shape()}, {"trainable", e.trainable}});
        scalars += e.tensor.numel();
    }
    const json meta{{"config", to_json(model.config)},
                    {"norm_stats", norm ? to_json(*norm) : json(nullptr)},
                    {"dtype", to_string(dtype)},
                    {"tensors", table},
                    {"extra", extra}};
    const std::string meta_text = meta.dump();
    const std::uint64_t width = dtype == StorageType::f32 ? 4 : 8;

    std::vector<char> out;
    out.reserve(32 + meta_text.size() + scalars * width);
    out.insert(out.end(), kMagic, kMagic + 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, meta_text.size());
    out.insert(out.end(), meta_text.begin(), meta_text.end());
    put<std::uint64_t>(out, scalars * width);
    for (const auto& e : model.params.entries())
        for (T v : e.tensor.values()) {
            if (dtype == StorageType::f32)
                put<float>(out, static_cast<float>(v));
            else
                put<double>(out, static_cast<double>(v));
        }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("failed writing checkpoint " + path.string());
}

CheckpointInfo read_checkpoint_info(const fs::path& path) {
    const auto buf = read_file(path);
    Reader r(buf, path);
    return info_from_json(read_header(r, path), path);
}

template <typename T>
Model<T> load_checkpoint(const fs::path& path, CheckpointInfo* info_out) {
    const auto buf = read_file(path);
    Reader r(buf, path);
    const json meta = read_header(r, path);
    CheckpointInfo info = info_from_json(meta, path);
    try {
        info.config.validate();
    } catch (const ConfigError& e) {
        throw DataError("checkpoint " + path.string() + ": " + e.what());
    }

    Model<T> model = build<T>(info.config, 0);
    const auto& table = meta.at("tensors");
    auto& entries = model.params.entries();
    if (table.size() != entries.size())
        throw DataError("checkpoint " + path.string() + ": holds " + std::to_string(table.size()) +
                        " tensors, config needs " + std::to_string(entries.size()));

    const std::uint64_t width = info.dtype == StorageType::f32 ? 4 : 8;
    std::uint64_t expected = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto name = table[i].at("name").get<std::string>();
        const auto shape = table[i].at("shape").get<ad::Shape>();
        if (name != entries[i].name || shape != entries[i].tensor.shape())
            throw DataError("checkpoint " + path.string() + ": tensor " + std::to_string(i) + " is " + name + " " +
                            ad::shape_string(shape) + ", expected " + entries[i].name + " " +
                            ad::shape_string(entries[i].tensor.shape()));
        expected += entries[i].tensor.numel() * width;
    }
    const auto payload = r.get<std::uint64_t>();
    if (payload != expected || r.remaining() != payload)
        throw DataError("checkpoint " + path.string() + ": payload is " + std::to_string(r.remaining()) +
                        " bytes, expected " + std::to_string(expected));

    for (auto& e : entries) {
        for (T& v : e.tensor.values()) {
            const double x = info.dtype == StorageType::f32 ? static_cast<double>(r.get<float>()) : r.get<double>();
            if (!std::isfinite(x)) throw DataError("checkpoint " + path.string() + ": non-finite value in " + e.name);
            v = static_cast<T>(x);
        }
    }
    if (info_out) *info_out = std::move(info);
    return model;
}

#define CLOUDFLOW_INSTANTIATE(T)                                                                              \
    template void save_checkpoint<T>(const fs::path&, const Model<T>&, const std::optional<NormStats>&, \
                                     StorageType, const json&);                                          \
    template Model<T> load_checkpoint<T>(const fs::path&, CheckpointInfo*);

CLOUDFLOW_INSTANTIATE(float)
CLOUDFLOW_INSTANTIATE(double)
#undef CLOUDFLOW_INSTANTIATE

}  // namespace cloudflow
