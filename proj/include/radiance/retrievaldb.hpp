#pragma once

// Key/value store of interface embeddings with brute-force inner-product
// retrieval. Keys are binding-site embeddings, values are binder embeddings;
// a query returns the values paired with the best-scoring entries.

#include "radiance/molgraph.hpp"
#include "radiance/rng.hpp"

#include <Eigen/Dense>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace radiance::db {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr char kMagic[4] = {'R', 'A', 'D', 'B'};

class DbFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class BadMagicError : public DbFormatError {
public:
    BadMagicError() : DbFormatError("bad magic") {}
};
class VersionMismatchError : public DbFormatError {
public:
    explicit VersionMismatchError(std::uint32_t v)
        : DbFormatError("unsupported database version " + std::to_string(v) + " (expected " + std::to_string(kFormatVersion) + ")") {}
};
class TruncatedFileError : public DbFormatError {
public:
    TruncatedFileError() : DbFormatError("truncated database file") {}
};
class ChecksumError : public DbFormatError {
public:
    ChecksumError() : DbFormatError("database checksum mismatch") {}
};

struct DatabaseEntry {
    std::string id;
    Eigen::VectorXd key;
    Eigen::VectorXd value;
    DomainTag domain_tag = DomainTag::synthetic;
};

/// Which stored vector a query key is compared against.
enum class Scoring { key_vs_key, key_vs_value };

enum class QueryMode { top_n, reverse_n, random };

inline QueryMode mode_from_string(const std::string& s) {
    if (s == "topN" || s == "top_n") return QueryMode::top_n;
    if (s == "reverseN" || s == "reverse_n") return QueryMode::reverse_n;
    if (s == "random") return QueryMode::random;
    throw std::invalid_argument("unknown retrieval mode: " + s);
}

inline std::string to_string(QueryMode m) {
    switch (m) {
        case QueryMode::top_n: return "topN";
        case QueryMode::reverse_n: return "reverseN";
        case QueryMode::random: return "random";
    }
    return "?";
}

struct RetrievalResult {
    std::vector<std::string> entry_ids;
    std::vector<double> scores;
    std::vector<Eigen::VectorXd> prompt;

    std::size_t size() const { return entry_ids.size(); }
    bool empty() const { return entry_ids.empty(); }
};

class Database {
public:
    Database() = default;
    explicit Database(int dim) : dim_(dim) {
        if (dim < 1) throw std::invalid_argument("database dimension must be >= 1");
    }

    int dim() const { return dim_; }
    std::uint32_t version() const { return kFormatVersion; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<DatabaseEntry>& entries() const { return entries_; }
    Scoring scoring() const { return scoring_; }
    void set_scoring(Scoring s) { scoring_ = s; }

    void add(DatabaseEntry e) {
        if (dim_ == 0) dim_ = static_cast<int>(e.key.size());
        if (e.key.size() != dim_ || e.value.size() != dim_) throw std::invalid_argument("entry " + e.id + " has wrong dimension");
        if (!e.key.allFinite() || !e.value.allFinite()) throw std::invalid_argument("entry " + e.id + " has non-finite vectors");
        if (index_.count(e.id)) throw std::invalid_argument("duplicate entry id " + e.id);
        index_.emplace(e.id, entries_.size());
        entries_.push_back(std::move(e));
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }

    const DatabaseEntry& at(const std::string& id) const {
        auto it = index_.find(id);
        if (it == index_.end()) throw std::out_of_range("unknown entry id " + id);
        return entries_[it->second];
    }

    /// Inner-product scores of `key` against every entry (stored keys, or
    /// stored values under Scoring::key_vs_value).
    std::vector<double> scores(const Eigen::VectorXd& key, Scoring scoring) const {
        check_dim(key);
        std::vector<double> s(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            s[i] = key.dot(scoring == Scoring::key_vs_key ? entries_[i].key : entries_[i].value);
        }
        return s;
    }
    std::vector<double> scores(const Eigen::VectorXd& key) const { return scores(key, scoring_); }

    /// Non-excluded entry indices, best score first, ties by ascending id.
    std::vector<std::size_t> ranking(const Eigen::VectorXd& key, const std::set<std::string>& exclude) const {
        const auto s = scores(key);
        std::vector<std::size_t> order;
        order.reserve(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!exclude.count(entries_[i].id)) order.push_back(i);
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            if (s[a] != s[b]) return s[a] > s[b];
            return entries_[a].id < entries_[b].id;
        });
        return order;
    }

    RetrievalResult query_topk(const Eigen::VectorXd& key, int k, const std::set<std::string>& exclude = {}) const {
        if (k < 0) throw std::invalid_argument("K must be >= 0");
        check_dim(key);
        if (k == 0) return {};
        auto order = ranking(key, exclude);
        if (order.size() > static_cast<std::size_t>(k)) order.resize(static_cast<std::size_t>(k));
        return result(key, order);
    }

    /// Every non-excluded entry scoring strictly above `threshold`.
    RetrievalResult query_adaptive(const Eigen::VectorXd& key, double threshold, const std::set<std::string>& exclude = {}) const {
        const auto s = scores(key);
        auto order = ranking(key, exclude);
        std::vector<std::size_t> kept;
        for (std::size_t i : order) {
            if (s[i] > threshold) kept.push_back(i);
        }
        return result(key, kept);
    }

    RetrievalResult query_mode(const Eigen::VectorXd& key, QueryMode mode, int n, const std::set<std::string>& exclude, Rng& rng) const {
        check_dim(key);
        if (n < 0) throw std::invalid_argument("n must be >= 0");
        std::size_t excluded = 0;
        for (const auto& e : entries_) excluded += exclude.count(e.id);
        if (static_cast<std::size_t>(n) > entries_.size() - excluded) {
            throw std::invalid_argument("requested " + std::to_string(n) + " entries but only " +
                                        std::to_string(entries_.size() - excluded) + " are available");
        }
        switch (mode) {
            case QueryMode::top_n: return query_topk(key, n, exclude);
            case QueryMode::reverse_n: {
                auto order = ranking(key, exclude);
                // lowest-scoring n, still reported best first
                std::vector<std::size_t> tail(order.end() - n, order.end());
                return result(key, tail);
            }
            case QueryMode::random: {
                std::vector<std::size_t> pool;
                for (std::size_t i = 0; i < entries_.size(); ++i) {
                    if (!exclude.count(entries_[i].id)) pool.push_back(i);
                }
                // partial Fisher-Yates
                for (int i = 0; i < n; ++i) {
                    const auto j = static_cast<std::size_t>(rng.uniform_int(i, static_cast<std::int64_t>(pool.size()) - 1));
                    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
                }
                pool.resize(static_cast<std::size_t>(n));
                const auto s = scores(key);
                std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
                    if (s[a] != s[b]) return s[a] > s[b];
                    return entries_[a].id < entries_[b].id;
                });
                return result(key, pool);
            }
        }
        throw std::invalid_argument("unknown retrieval mode");
    }

private:
    void check_dim(const Eigen::VectorXd& key) const {
        if (key.size() != dim_) {
            throw std::invalid_argument("query dimension " + std::to_string(key.size()) + " does not match database dimension " +
                                        std::to_string(dim_));
        }
    }

    RetrievalResult result(const Eigen::VectorXd& key, const std::vector<std::size_t>& idx) const {
        const auto s = scores(key);
        RetrievalResult r;
        for (std::size_t i : idx) {
            r.entry_ids.push_back(entries_[i].id);
            r.scores.push_back(s[i]);
            r.prompt.push_back(entries_[i].value);
        }
        return r;
    }

    int dim_ = 0;
    Scoring scoring_ = Scoring::key_vs_key;
    std::vector<DatabaseEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Recall

struct RecallQuery {
    Eigen::VectorXd key;
    std::string truth_id;
};

/// For each fraction f (0.05 means 5%), the share of queries whose ground-truth
/// entry ranks within ceil(f * |db|) when every entry is scored by
/// `scoring`. Ties rank the truth behind equal-scoring entries with smaller ids,
/// as in query_topk.
inline std::vector<double> rc_at(const Database& db, const std::vector<RecallQuery>& queries, const std::vector<double>& fractions,
                                 Scoring scoring) {
    if (queries.empty()) throw std::invalid_argument("rc_at: no queries");
    std::vector<std::size_t> hits(fractions.size(), 0);
    for (const auto& q : queries) {
        if (!db.contains(q.truth_id)) throw std::invalid_argument("rc_at: truth id " + q.truth_id + " not in database");
        const auto s = db.scores(q.key, scoring);
        std::size_t truth = 0;
        for (std::size_t i = 0; i < db.size(); ++i) {
            if (db.entries()[i].id == q.truth_id) truth = i;
        }
        std::size_t rank = 1;
        for (std::size_t i = 0; i < db.size(); ++i) {
            if (i == truth) continue;
            if (s[i] > s[truth] || (s[i] == s[truth] && db.entries()[i].id < q.truth_id)) ++rank;
        }
        for (std::size_t f = 0; f < fractions.size(); ++f) {
            const auto cut = static_cast<std::size_t>(std::ceil(fractions[f] * static_cast<double>(db.size()) - 1e-9));
            if (rank <= cut) ++hits[f];
        }
    }
    std::vector<double> out;
    for (std::size_t h : hits) out.push_back(static_cast<double>(h) / static_cast<double>(queries.size()));
    return out;
}

/// Recall of ground-truth binders: a site key is compared against stored
/// binder values, so the pairing learned by the contrastive objective is what
/// gets measured.
inline std::vector<double> rc_at(const Database& db, const std::vector<RecallQuery>& queries, const std::vector<double>& fractions) {
    return rc_at(db, queries, fractions, Scoring::key_vs_value);
}

// ---------------------------------------------------------------------------
// Persistence

namespace io_detail {

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    buf.append(bytes, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& data, std::size_t begin, std::size_t end) : data_(data), pos_(begin), end_(end) {}

    template <typename T>
    T get() {
        if (pos_ + sizeof(T) > end_) throw TruncatedFileError();
        char bytes[sizeof(T)];
        std::memcpy(bytes, data_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
        pos_ += sizeof(T);
        T v;
        std::memcpy(&v, bytes, sizeof(T));
        return v;
    }

    std::string bytes(std::size_t n) {
        if (pos_ + n > end_) throw TruncatedFileError();
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    const std::string& data_;
    std::size_t pos_;
    std::size_t end_;
};

inline std::uint32_t crc32_of(const std::string& data, std::size_t begin, std::size_t end) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(data.data() + begin), static_cast<uInt>(end - begin)));
}

inline std::uint8_t domain_code(DomainTag t) { return static_cast<std::uint8_t>(t); }

inline DomainTag domain_from_code(std::uint8_t c) {
    if (c > static_cast<std::uint8_t>(DomainTag::synthetic)) throw DbFormatError("unknown domain tag code " + std::to_string(c));
    return static_cast<DomainTag>(c);
}

}  // namespace io_detail

/// Serialized bytes: magic, u32 version, u32 dim, u64 count, entries, then the
/// CRC32 of everything after the magic.
inline std::string serialize(const Database& db) {
    using io_detail::put;
    std::string buf(kMagic, 4);
    put<std::uint32_t>(buf, kFormatVersion);
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(db.dim()));
    put<std::uint64_t>(buf, db.size());
    for (const auto& e : db.entries()) {
        if (e.id.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("entry id too long: " + e.id);
        put<std::uint16_t>(buf, static_cast<std::uint16_t>(e.id.size()));
        buf += e.id;
        put<std::uint8_t>(buf, io_detail::domain_code(e.domain_tag));
        for (Eigen::Index i = 0; i < e.key.size(); ++i) put<float>(buf, static_cast<float>(e.key(i)));
        for (Eigen::Index i = 0; i < e.value.size(); ++i) put<float>(buf, static_cast<float>(e.value(i)));
    }
    put<std::uint32_t>(buf, io_detail::crc32_of(buf, 4, buf.size()));
    return buf;
}

inline Database deserialize(const std::string& data) {
    if (data.size() < 4 || std::memcmp(data.data(), kMagic, 4) != 0) throw BadMagicError();
    io_detail::Reader header(data, 4, data.size());
    const auto version = header.get<std::uint32_t>();
    if (version != kFormatVersion) throw VersionMismatchError(version);
    if (data.size() < 4 + 4 + 4 + 8 + 4) throw TruncatedFileError();
    const std::size_t payload_end = data.size() - 4;
    io_detail::Reader r(data, 8, payload_end);
    const auto dim = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    // entries are at least 2 + 1 + 8 * dim bytes each; catch truncation before trusting count
    const std::size_t min_entry = 3 + 8 * static_cast<std::size_t>(dim);
    if (count > 0 && (payload_end - r.pos()) / std::max<std::size_t>(min_entry, 1) < count) throw TruncatedFileError();
    Database db(static_cast<int>(std::max<std::uint32_t>(dim, 1)));
    std::vector<DatabaseEntry> entries;
    entries.reserve(static_cast<std::size_t>(count));
    for (std::uint64_t n = 0; n < count; ++n) {
        DatabaseEntry e;
        const auto len = r.get<std::uint16_t>();
        e.id = r.bytes(len);
        e.domain_tag = io_detail::domain_from_code(r.get<std::uint8_t>());
        e.key.resize(dim);
        e.value.resize(dim);
        for (std::uint32_t i = 0; i < dim; ++i) e.key(i) = r.get<float>();
        for (std::uint32_t i = 0; i < dim; ++i) e.value(i) = r.get<float>();
        entries.push_back(std::move(e));
    }
    if (r.pos() != payload_end) throw DbFormatError("trailing bytes after database entries");
    io_detail::Reader tail(data, payload_end, data.size());
    if (tail.get<std::uint32_t>() != io_detail::crc32_of(data, 4, payload_end)) throw ChecksumError();
    for (auto& e : entries) db.add(std::move(e));
    return db;
}

inline void save(const Database& db, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const std::string bytes = serialize(db);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path);
}

inline Database load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(data);
}

/// Entries are stored as f32; this rounds a database's vectors the same way so
/// an in-memory database matches its saved form exactly.
inline Database rounded_to_storage(const Database& db) {
    Database out(db.dim());
    out.set_scoring(db.scoring());
    for (auto e : db.entries()) {
        e.key = e.key.cast<float>().cast<double>();
        e.value = e.value.cast<float>().cast<double>();
        out.add(std::move(e));
    }
    return out;
}

}  // namespace radiance::db
