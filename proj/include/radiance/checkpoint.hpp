#pragma once

// Parameter archive: magic "RACK", u32 version, u64 manifest length, JSON
// manifest, u64 tensor count, then per tensor u16 name length, name, u32 rows,
// u32 cols and rows*cols little-endian f32 values in row-major order, and a
// trailing CRC32 of everything after the magic. Tensor names are
// "<section>/<parameter path>".

#include "radiance/nn.hpp"
#include "radiance/retrievaldb.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>
#include <string>

namespace radiance::ckpt {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr char kMagic[4] = {'R', 'A', 'C', 'K'};

struct Archive {
    nlohmann::json manifest = nlohmann::json::object();
    std::map<std::string, ag::Matrix> tensors;

    bool has_section(const std::string& name) const {
        return manifest.contains("sections") && manifest["sections"].contains(name);
    }

    const nlohmann::json& section_config(const std::string& name) const {
        if (!has_section(name)) throw std::runtime_error("checkpoint has no section '" + name + "'");
        return manifest["sections"][name];
    }

    /// Copies the tensors of `section` (rounded to f32) into it.
    void add_section(const std::string& name, const nn::ParamStore& store, nlohmann::json config) {
        manifest["sections"][name] = std::move(config);
        for (const auto& [pname, v] : store.all()) tensors[name + "/" + pname] = v.value().cast<float>().cast<double>();
    }

    /// Copies another archive's section verbatim.
    void copy_section(const Archive& other, const std::string& name) {
        manifest["sections"][name] = other.section_config(name);
        const std::string prefix = name + "/";
        for (const auto& [tname, m] : other.tensors) {
            if (tname.rfind(prefix, 0) == 0) tensors[tname] = m;
        }
    }

    /// Loads every parameter of `store` from `section`; names and shapes must match exactly.
    void restore(const std::string& section, nn::ParamStore& store) const {
        const std::string prefix = section + "/";
        std::size_t found = 0;
        for (const auto& [tname, _] : tensors) found += tname.rfind(prefix, 0) == 0;
        if (found != store.all().size()) {
            throw std::runtime_error("checkpoint section '" + section + "' has " + std::to_string(found) + " tensors, model expects " +
                                     std::to_string(store.all().size()));
        }
        for (const auto& [pname, v] : store.all()) {
            auto it = tensors.find(prefix + pname);
            if (it == tensors.end()) throw std::runtime_error("checkpoint is missing tensor " + prefix + pname);
            store.assign(pname, it->second);
        }
    }
};

inline std::string serialize(const Archive& a) {
    using db::io_detail::put;
    std::string buf(kMagic, 4);
    put<std::uint32_t>(buf, kVersion);
    nlohmann::json manifest = a.manifest;
    manifest["format_version"] = kVersion;
    const std::string text = manifest.dump();
    put<std::uint64_t>(buf, text.size());
    buf += text;
    put<std::uint64_t>(buf, a.tensors.size());
    for (const auto& [name, m] : a.tensors) {
        put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
        buf += name;
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.rows()));
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) put<float>(buf, static_cast<float>(m(r, c)));
        }
    }
    put<std::uint32_t>(buf, db::io_detail::crc32_of(buf, 4, buf.size()));
    return buf;
}

inline Archive deserialize(const std::string& data) {
    if (data.size() < 4 || std::memcmp(data.data(), kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic");
    if (data.size() < 8 + 8 + 8 + 4) throw std::runtime_error("checkpoint: truncated file");
    const std::size_t end = data.size() - 4;
    db::io_detail::Reader r(data, 4, end);
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    db::io_detail::Reader tail(data, end, data.size());
    if (tail.get<std::uint32_t>() != db::io_detail::crc32_of(data, 4, end)) throw std::runtime_error("checkpoint: checksum mismatch");
    Archive a;
    const auto mlen = r.get<std::uint64_t>();
    a.manifest = nlohmann::json::parse(r.bytes(static_cast<std::size_t>(mlen)));
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t n = 0; n < count; ++n) {
        const auto len = r.get<std::uint16_t>();
        std::string name = r.bytes(len);
        const auto rows = r.get<std::uint32_t>();
        const auto cols = r.get<std::uint32_t>();
        ag::Matrix m(rows, cols);
        for (std::uint32_t i = 0; i < rows; ++i) {
            for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.get<float>();
        }
        a.tensors.emplace(std::move(name), std::move(m));
    }
    return a;
}

inline void save(const Archive& a, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const std::string bytes = serialize(a);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path);
}

inline Archive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return deserialize(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
}

}  // namespace radiance::ckpt
