#pragma once

// Orchestration: run configuration, datasets on disk, VAE and diffusion
// training, database construction, retrieval-conditioned generation,
// iterative redesign and evaluation reports.

#include "radiance/checkpoint.hpp"
#include "radiance/cvae.hpp"
#include "radiance/ldm.hpp"
#include "radiance/metrics.hpp"
#include "radiance/molgraph.hpp"
#include "radiance/retrievaldb.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace radiance::pipeline {

namespace fs = std::filesystem;

class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& phase, const std::string& component, int epoch, int step)
        : std::runtime_error(phase + " loss component '" + component + "' is not finite (epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step) + ")"),
          component_(component) {}
    const std::string& component() const { return component_; }

private:
    std::string component_;
};

// ---------------------------------------------------------------- config

struct RunConfig {
    std::uint64_t seed = 0;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double grad_clip = 10.0;
    int vae_epochs = 30;
    int ldm_epochs = 30;
    double holdout_fraction = 0.1;
    bool deterministic = false;
    cvae::CvaeConfig cvae;
    ldm::LdmConfig ldm;
    ldm::RetrievalSettings retrieval;
    int n_samples = 10;
    int binder_length = 0;  // 0: copy the reference binder length
    int redesign_rounds = 3;
    int redesign_candidates = 4;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
        if (vae_epochs < 0 || ldm_epochs < 0) throw std::invalid_argument("epochs must be >= 0");
        if (holdout_fraction < 0.0 || holdout_fraction >= 1.0) throw std::invalid_argument("holdout_fraction must be in [0, 1)");
        if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
        if (binder_length < 0) throw std::invalid_argument("binder_length must be >= 0");
        if (redesign_rounds < 0 || redesign_candidates < 1) throw std::invalid_argument("bad redesign settings");
        if (retrieval.n < 0) throw std::invalid_argument("retrieval.n must be >= 0");
        cvae.validate();
        ldm.validate();
        if (ldm.latent_size != cvae.latent_size) throw std::invalid_argument("ldm.latent_size must equal cvae.latent_size");
        if (ldm.prompt_dim != cvae.hidden_size) throw std::invalid_argument("ldm.prompt_dim must equal cvae.hidden_size (prompts are binder values)");
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"seed", c.seed},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"grad_clip", c.grad_clip},
         {"vae_epochs", c.vae_epochs},
         {"ldm_epochs", c.ldm_epochs},
         {"holdout_fraction", c.holdout_fraction},
         {"deterministic", c.deterministic},
         {"cvae", c.cvae},
         {"ldm", c.ldm},
         {"retrieval", c.retrieval.to_json()},
         {"n_samples", c.n_samples},
         {"binder_length", c.binder_length},
         {"redesign_rounds", c.redesign_rounds},
         {"redesign_candidates", c.redesign_candidates}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c.seed = j.value("seed", d.seed);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.vae_epochs = j.value("vae_epochs", d.vae_epochs);
    c.ldm_epochs = j.value("ldm_epochs", d.ldm_epochs);
    c.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
    c.deterministic = j.value("deterministic", d.deterministic);
    c.cvae = j.contains("cvae") ? j["cvae"].get<cvae::CvaeConfig>() : d.cvae;
    c.ldm = j.contains("ldm") ? j["ldm"].get<ldm::LdmConfig>() : d.ldm;
    c.retrieval = j.contains("retrieval") ? ldm::RetrievalSettings::from_json(j["retrieval"]) : d.retrieval;
    c.n_samples = j.value("n_samples", d.n_samples);
    c.binder_length = j.value("binder_length", d.binder_length);
    c.redesign_rounds = j.value("redesign_rounds", d.redesign_rounds);
    c.redesign_candidates = j.value("redesign_candidates", d.redesign_candidates);
}

/// Parses "key = value" lines (dotted keys address nested sections, '#'
/// starts a comment). Values are read as JSON when possible, else as strings.
inline std::vector<std::pair<std::string, nlohmann::json>> parse_flat_config(const std::string& text) {
    std::vector<std::pair<std::string, nlohmann::json>> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find_first_of("=:");
        if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string raw = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
        if (value.is_discarded()) value = raw;
        out.emplace_back(key, std::move(value));
    }
    return out;
}

/// Applies dotted-key overrides; unknown keys are rejected.
inline RunConfig apply_overrides(const RunConfig& base, const std::vector<std::pair<std::string, nlohmann::json>>& overrides) {
    nlohmann::json j = base;
    for (const auto& [key, value] : overrides) {
        nlohmann::json* node = &j;
        std::string rest = key;
        while (true) {
            const auto dot = rest.find('.');
            const std::string part = rest.substr(0, dot);
            if (!node->is_object() || !node->contains(part)) throw std::invalid_argument("unknown config key: " + key);
            node = &(*node)[part];
            if (dot == std::string::npos) break;
            rest = rest.substr(dot + 1);
        }
        // numbers given for floating fields stay numbers; nulls are allowed where the default is null
        *node = value;
    }
    RunConfig out = j.get<RunConfig>();
    out.validate();
    return out;
}

inline RunConfig load_config_file(const std::string& path, const RunConfig& base = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return apply_overrides(base, parse_flat_config(buf.str()));
}

/// Writes the resolved configuration as config.json into `dir`.
inline void write_config(const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream out(dir / "config.json");
    out << nlohmann::json(cfg).dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing " + (dir / "config.json").string());
}

// ---------------------------------------------------------------- datasets

inline constexpr const char* kComplexSuffix = ".complex.json";

inline void save_dataset(const std::vector<ComplexRecord>& records, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& r : records) save_complex(r, (dir / (r.id + kComplexSuffix)).string());
}

/// All complexes in `dir`, ordered by file name.
inline std::vector<ComplexRecord> load_dataset(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
    std::vector<fs::path> files;
    const std::string suffix = kComplexSuffix;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<ComplexRecord> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(load_complex(f.string()));
    return out;
}

/// `n` prepared toy complexes with binder lengths drawn from [binder_min, binder_max].
inline std::vector<ComplexRecord> synthetic_dataset(int n, std::uint64_t seed, int binder_min = 6, int binder_max = 8, int target_len = 24) {
    Rng rng(seed);
    std::vector<ComplexRecord> out;
    for (int i = 0; i < n; ++i) {
        const int len = static_cast<int>(rng.uniform_int(binder_min, binder_max));
        const std::uint64_t s = rng.engine()();
        ComplexRecord rec = prepare_complex(synth_complex(s, len, target_len));
        rec.id = "toy_" + std::to_string(i);
        out.push_back(std::move(rec));
    }
    return out;
}

/// Families of near-duplicate interfaces: each family jitters one base
/// complex with Gaussian noise of `sigma` Å; members share residue types.
inline std::vector<ComplexRecord> synthetic_families(int families, int members, std::uint64_t seed, double sigma = 0.3, int binder_len = 6,
                                                     int target_len = 24) {
    Rng rng(seed);
    std::vector<ComplexRecord> out;
    for (int f = 0; f < families; ++f) {
        const ComplexRecord base = synth_complex(rng.engine()(), binder_len, target_len);
        for (int m = 0; m < members; ++m) {
            const std::string id = "fam" + std::to_string(f) + "_" + std::to_string(m);
            out.push_back(prepare_complex(perturb_complex(base, rng.engine()(), sigma, id)));
        }
    }
    return out;
}

/// Deterministic train / held-out partition by a seeded shuffle of the ids.
inline std::pair<std::vector<ComplexRecord>, std::vector<ComplexRecord>> split_dataset(std::vector<ComplexRecord> records, double fraction,
                                                                                        std::uint64_t seed) {
    std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    Rng rng = Rng(seed).split(0x5b11);
    rng.shuffle(records);
    const auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(records.size())));
    std::vector<ComplexRecord> hold(records.end() - static_cast<std::ptrdiff_t>(n_hold), records.end());
    records.resize(records.size() - n_hold);
    return {std::move(records), std::move(hold)};
}

// ---------------------------------------------------------------- logging

/// JSON-lines log kept in memory and optionally mirrored to a file.
class JsonlLog {
public:
    JsonlLog() = default;
    explicit JsonlLog(const fs::path& path) : out_(std::make_unique<std::ofstream>(path)) {
        if (!*out_) throw std::runtime_error("cannot write log " + path.string());
    }
    void write(const nlohmann::json& record) {
        records_.push_back(record);
        if (out_) {
            *out_ << record.dump() << "\n";
            out_->flush();
        }
    }
    const std::vector<nlohmann::json>& records() const { return records_; }

private:
    std::unique_ptr<std::ofstream> out_;
    std::vector<nlohmann::json> records_;
};

// ---------------------------------------------------------------- VAE

namespace detail {

inline cvae::VaeLossReport mean_report(const std::vector<cvae::VaeLossReport>& reports) {
    cvae::VaeLossReport m;
    if (reports.empty()) return m;
    for (const auto& r : reports) {
        m.recon_type += r.recon_type;
        m.recon_field += r.recon_field;
        m.kl_scalar += r.kl_scalar;
        m.kl_coord += r.kl_coord;
        m.contrastive += r.contrastive;
        m.bond += r.bond;
        m.local_distance += r.local_distance;
        m.total += r.total;
    }
    const double n = static_cast<double>(reports.size());
    for (double* v : {&m.recon_type, &m.recon_field, &m.kl_scalar, &m.kl_coord, &m.contrastive, &m.bond, &m.local_distance, &m.total}) *v /= n;
    return m;
}

template <typename T>
std::vector<std::vector<T>> batches(const std::vector<T>& items, int size) {
    std::vector<std::vector<T>> out;
    for (std::size_t i = 0; i < items.size(); i += static_cast<std::size_t>(size)) {
        out.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i),
                         items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), i + static_cast<std::size_t>(size))));
    }
    return out;
}

}  // namespace detail

/// Loss report over `records` in fixed batches with a fixed noise stream, so
/// successive evaluations are comparable.
inline cvae::VaeLossReport evaluate_vae(const cvae::CvaeModel& model, const std::vector<ComplexRecord>& records, int batch_size,
                                        std::uint64_t seed) {
    Rng rng = Rng(seed).split(0xe7a1);
    std::vector<cvae::VaeLossReport> reports;
    for (const auto& b : detail::batches(records, batch_size)) reports.push_back(model.total_loss(b, rng).second);
    return detail::mean_report(reports);
}

struct VaeTraining {
    std::unique_ptr<cvae::CvaeModel> model;
    std::vector<cvae::VaeLossReport> train_reports;    // per epoch
    std::vector<cvae::VaeLossReport> heldout_reports;  // per epoch, empty without a held-out split
};

/// Minimises the VAE objective with Adam; one log record per epoch.
inline VaeTraining train_vae(const RunConfig& cfg, const std::vector<ComplexRecord>& train, const std::vector<ComplexRecord>& heldout,
                             JsonlLog* log = nullptr) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("train_vae: empty training set");
    VaeTraining out;
    out.model = std::make_unique<cvae::CvaeModel>(cfg.cvae, cfg.seed);
    nn::AdamConfig acfg;
    acfg.lr = cfg.learning_rate;
    acfg.grad_clip = cfg.grad_clip;
    nn::Adam adam(out.model->params(), acfg);
    Rng rng = Rng(cfg.seed).split(0x7ae);
    std::vector<ComplexRecord> order = train;
    for (int epoch = 1; epoch <= cfg.vae_epochs; ++epoch) {
        rng.shuffle(order);
        std::vector<cvae::VaeLossReport> reports;
        int step = 0;
        for (const auto& batch : detail::batches(order, cfg.batch_size)) {
            ++step;
            auto [loss, report] = out.model->total_loss(batch, rng);
            if (auto bad = report.first_non_finite()) throw NonFiniteLossError("vae", *bad, epoch, step);
            ag::backward(loss);
            adam.step();
            if (!out.model->params().all_finite()) throw NonFiniteLossError("vae", "parameters", epoch, step);
            reports.push_back(report);
        }
        out.train_reports.push_back(detail::mean_report(reports));
        nlohmann::json rec = {{"phase", "vae"},
                              {"epoch", epoch},
                              {"kl_sequence_weight", cfg.cvae.kl_sequence_weight},
                              {"kl_structure_weight", cfg.cvae.kl_structure_weight},
                              {"train", cvae::to_json(out.train_reports.back())}};
        if (!heldout.empty()) {
            out.heldout_reports.push_back(evaluate_vae(*out.model, heldout, cfg.batch_size, cfg.seed));
            rec["heldout"] = cvae::to_json(out.heldout_reports.back());
        }
        if (log) log->write(rec);
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

inline constexpr const char* kVaeSection = "vae";
inline constexpr const char* kLdmSection = "ldm";

inline ckpt::Archive vae_archive(const cvae::CvaeModel& model) {
    ckpt::Archive a;
    a.add_section(kVaeSection, model.params(), nlohmann::json(model.config()));
    return a;
}

inline std::unique_ptr<cvae::CvaeModel> vae_from_archive(const ckpt::Archive& a) {
    auto m = std::make_unique<cvae::CvaeModel>(a.section_config(kVaeSection).get<cvae::CvaeConfig>());
    a.restore(kVaeSection, m->params());
    return m;
}

inline std::unique_ptr<ldm::Denoiser> ldm_from_archive(const ckpt::Archive& a) {
    auto m = std::make_unique<ldm::Denoiser>(a.section_config(kLdmSection).get<ldm::LdmConfig>());
    a.restore(kLdmSection, m->params());
    return m;
}

// ---------------------------------------------------------------- database

struct EncodedDatabase {
    db::Database database;
    std::vector<std::string> failed_ids;
};

/// One entry per complex: site key and binder value. Complexes that fail to
/// encode are skipped and listed.
inline EncodedDatabase encode_database(const cvae::CvaeModel& model, const std::vector<ComplexRecord>& records) {
    EncodedDatabase out{db::Database(model.config().hidden_size), {}};
    for (const auto& rec : records) {
        try {
            const auto key = model.encode(rec.site).second;
            const auto value = model.encode(rec.binder).second;
            out.database.add({rec.id, key.vec, value.vec, rec.domain_tag});
        } catch (const std::exception& e) {
            std::cerr << "encode_database: skipping " << rec.id << ": " << e.what() << "\n";
            out.failed_ids.push_back(rec.id);
        }
    }
    return out;
}

// ---------------------------------------------------------------- diffusion

struct LdmTraining {
    std::unique_ptr<ldm::Denoiser> model;
    std::vector<double> epoch_losses;
};

/// Trains the denoiser on encoded latents of `train`, retrieving prompts from
/// `database` with the configured settings (own entry excluded).
inline LdmTraining train_ldm(const RunConfig& cfg, const cvae::CvaeModel& vae, const std::vector<ComplexRecord>& train,
                             const db::Database& database, JsonlLog* log = nullptr) {
    cfg.validate();
    if (train.empty()) throw std::invalid_argument("train_ldm: empty training set");
    std::vector<ldm::LdmSample> samples;
    samples.reserve(train.size());
    for (const auto& rec : train) samples.push_back(ldm::make_sample(vae, rec));
    LdmTraining out;
    out.model = std::make_unique<ldm::Denoiser>(cfg.ldm, Rng(cfg.seed).split(0x1d7).engine()());
    nn::AdamConfig acfg;
    acfg.lr = cfg.learning_rate;
    acfg.grad_clip = cfg.grad_clip;
    nn::Adam adam(out.model->params(), acfg);
    const auto sched = ldm::cosine_schedule(cfg.ldm.T, cfg.ldm.schedule_offset);
    Rng rng = Rng(cfg.seed).split(0x1d8);
    for (int epoch = 1; epoch <= cfg.ldm_epochs; ++epoch) {
        rng.shuffle(samples);
        double acc = 0.0;
        int step = 0, steps = 0;
        std::size_t excluded_hits = 0;
        for (const auto& batch : detail::batches(samples, cfg.batch_size)) {
            ++step;
            auto res = ldm::ldm_train_step(*out.model, batch, database, cfg.retrieval, sched, rng);
            if (!std::isfinite(res.loss.item())) throw NonFiniteLossError("ldm", "diffusion", epoch, step);
            for (const auto& [id, r] : res.provenance) excluded_hits += std::count(r.entry_ids.begin(), r.entry_ids.end(), id);
            ag::backward(res.loss);
            adam.step();
            acc += res.loss.item();
            ++steps;
        }
        if (excluded_hits != 0) throw std::logic_error("train_ldm: a sample retrieved its own entry");
        out.epoch_losses.push_back(acc / steps);
        if (log) log->write({{"phase", "ldm"}, {"epoch", epoch}, {"diffusion", out.epoch_losses.back()}, {"retrieval", cfg.retrieval.to_json()}});
    }
    return out;
}

// ---------------------------------------------------------------- generation

/// Worker count: RADIANCE_NUM_THREADS if set, else the hardware count; 1 when deterministic.
inline unsigned worker_count(bool deterministic) {
    if (deterministic) return 1;
    if (const char* env = std::getenv("RADIANCE_NUM_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

struct GeneratedSample {
    MolecularGraph binder;
    db::RetrievalResult provenance;
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const db::RetrievalResult& r) { return {{"entry_ids", r.entry_ids}, {"scores", r.scores}}; }

/// Retrieval-conditioned design for one binding site: encode the site into a
/// key, retrieve the prompt, run the reverse chain from N(0, I) and decode.
/// Each sample draws from its own stream derived from `seed`, so results do
/// not depend on the number of workers.
inline std::vector<GeneratedSample> generate(const cvae::CvaeModel& vae, const ldm::Denoiser& model, const db::Database& database,
                                             MolecularGraph site, const RunConfig& cfg, int n_samples, int binder_length, std::uint64_t seed,
                                             const std::set<std::string>& exclude = {}, std::vector<std::string>* warnings = nullptr) {
    if (n_samples < 1) throw std::invalid_argument("generate: n_samples must be >= 1");
    if (binder_length < 1) throw std::invalid_argument("generate: binder length must be >= 1");
    if (site.blocks.empty()) throw std::invalid_argument("generate: empty binding site");
    if (site.edges.empty()) site = build_block_graph(std::move(site), vae.config().k_neighbors);
    const auto [site_cloud, key] = vae.encode(site);
    const cvae::LatentCloud site_means = site_cloud.means();
    const ldm::LatentInputs centred = ldm::center_latents({}, site_cloud);

    db::RetrievalResult retrieved;
    const bool wants_prompt = cfg.retrieval.threshold.has_value() || cfg.retrieval.n > 0;
    if (wants_prompt && database.empty()) {
        if (warnings) warnings->push_back("database is empty; generating without retrieval");
        std::cerr << "warning: database is empty; generating without retrieval\n";
    } else if (wants_prompt) {
        Rng rr = Rng(seed).split(0);
        retrieved = ldm::retrieve(database, key.vec, cfg.retrieval, exclude, rr);
    }
    const ldm::PromptSet prompt = ldm::to_prompt(retrieved);
    const auto sched = ldm::cosine_schedule(model.config().T, model.config().schedule_offset);

    std::vector<GeneratedSample> out(static_cast<std::size_t>(n_samples));
    auto run_one = [&](std::size_t i) {
        const std::uint64_t stream = i + 1;
        Rng rng = Rng(seed).split(stream);
        const auto state = ldm::sample(model, centred.site, prompt, binder_length, sched, rng, centred.frame);
        const auto zx = ldm::to_latent_cloud(state.u, state.frame, model.config().latent_size);
        out[i].binder = vae.decode(zx, site_means, site, vae.config().decode_steps, rng);
        out[i].provenance = retrieved;
        out[i].seed = stream;
    };
    const unsigned workers = std::min<unsigned>(worker_count(cfg.deterministic), static_cast<unsigned>(n_samples));
    if (workers <= 1) {
        for (std::size_t i = 0; i < out.size(); ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(workers);
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < out.size(); i = next++) run_one(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    return out;
}

// ---------------------------------------------------------------- redesign

/// Scores a complex; lower is better. Implementations must be deterministic.
class ExternalScorer {
public:
    virtual ~ExternalScorer() = default;
    virtual std::string name() const = 0;
    virtual double score(const ComplexRecord& complex) const = 0;
};

/// Built-in stand-in for an energy function: minus the number of
/// binder/target residue pairs with any heavy atoms within 4.5 Å.
class ContactScorer : public ExternalScorer {
public:
    explicit ContactScorer(double cutoff = 4.5) : cutoff_(cutoff) {}
    std::string name() const override { return "contacts"; }
    double score(const ComplexRecord& c) const override {
        int contacts = 0;
        for (const auto& b : c.binder.blocks) {
            for (const auto& s : c.site.blocks) {
                bool hit = false;
                for (const auto& a : b.atoms) {
                    for (const auto& t : s.atoms) {
                        if ((a.coord - t.coord).norm() <= cutoff_) {
                            hit = true;
                            break;
                        }
                    }
                    if (hit) break;
                }
                contacts += hit;
            }
        }
        return -static_cast<double>(contacts);
    }

private:
    double cutoff_;
};

/// Contiguous designable span of binder blocks (0-based).
struct Region {
    int start = 0;
    int length = 0;
};

/// Parses "0-2,5-7" (inclusive, 0-based block positions).
inline std::vector<Region> parse_regions(const std::string& spec) {
    std::vector<Region> out;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto dash = tok.find('-');
        try {
            const int a = std::stoi(tok.substr(0, dash));
            const int b = dash == std::string::npos ? a : std::stoi(tok.substr(dash + 1));
            if (a < 0 || b < a) throw std::invalid_argument("");
            out.push_back({a, b - a + 1});
        } catch (const std::exception&) {
            throw std::invalid_argument("bad region '" + tok + "'; expected start-end");
        }
    }
    if (out.empty()) throw std::invalid_argument("no regions given");
    return out;
}

struct RedesignEvent {
    int round = 0;
    int region = 0;
    std::optional<double> score;  // best candidate of this event
    double best_so_far = 0.0;
    bool accepted = false;
    std::string note;
};

struct RedesignResult {
    ComplexRecord best;
    double best_score = 0.0;
    std::vector<RedesignEvent> trajectory;
};

inline nlohmann::json to_json(const RedesignEvent& e) {
    return {{"round", e.round},
            {"region", e.region},
            {"score", e.score ? nlohmann::json(*e.score) : nlohmann::json(nullptr)},
            {"best_so_far", e.best_so_far},
            {"accepted", e.accepted},
            {"note", e.note}};
}

/// Alternates regeneration of each designable region with scoring. The rest of
/// the binder and the target form the conditioning context; the best
/// candidate so far (ties: earliest, the starting framework first) is kept.
/// A scorer failure abandons the remainder of that round.
inline RedesignResult iterative_redesign(const cvae::CvaeModel& vae, const ldm::Denoiser& model, const db::Database& database,
                                         const ComplexRecord& framework, const std::vector<Region>& regions, const ExternalScorer& scorer,
                                         const RunConfig& cfg, int rounds, std::uint64_t seed) {
    const int n = static_cast<int>(framework.binder.blocks.size());
    for (const auto& r : regions) {
        if (r.length < 1 || r.start + r.length > n) throw std::invalid_argument("region outside the binder");
    }
    RedesignResult res;
    res.best = framework;
    try {
        res.best_score = scorer.score(framework);
    } catch (const std::exception& e) {
        res.best_score = std::numeric_limits<double>::infinity();
        std::cerr << "redesign: scoring the framework failed: " << e.what() << "\n";
    }
    for (int round = 1; round <= rounds; ++round) {
        for (std::size_t g = 0; g < regions.size(); ++g) {
            const Region& region = regions[g];
            RedesignEvent ev{round, static_cast<int>(g), std::nullopt, res.best_score, false, ""};
            MolecularGraph context;
            context.role = GraphRole::binding_site;
            context.blocks = res.best.site.blocks;
            for (int i = 0; i < n; ++i) {
                if (i < region.start || i >= region.start + region.length) context.blocks.push_back(res.best.binder.blocks[static_cast<std::size_t>(i)]);
            }
            context = build_block_graph(std::move(context), vae.config().k_neighbors);
            const std::uint64_t event_seed = Rng(seed).split(static_cast<std::uint64_t>(round) * 1000 + g).engine()();
            const auto cands = generate(vae, model, database, context, cfg, cfg.redesign_candidates, region.length, event_seed, {framework.id});
            bool failed = false;
            for (const auto& c : cands) {
                ComplexRecord cand = res.best;
                for (int k = 0; k < region.length; ++k) {
                    auto& slot = cand.binder.blocks[static_cast<std::size_t>(region.start + k)];
                    Block b = c.binder.blocks[static_cast<std::size_t>(k)];
                    b.chain_id = slot.chain_id;
                    b.residue_index = slot.residue_index;
                    b.insertion_code = slot.insertion_code;
                    slot = std::move(b);
                }
                cand.binder.edges.clear();
                cand.binder = build_block_graph(std::move(cand.binder), vae.config().k_neighbors);
                double s = 0.0;
                try {
                    s = scorer.score(cand);
                } catch (const std::exception& e) {
                    ev.note = std::string("scorer failed: ") + e.what() + "; rest of round skipped";
                    failed = true;
                    break;
                }
                if (!ev.score || s < *ev.score) ev.score = s;
                if (s < res.best_score) {
                    res.best_score = s;
                    res.best = std::move(cand);
                    ev.accepted = true;
                }
            }
            ev.best_so_far = res.best_score;
            res.trajectory.push_back(ev);
            if (failed) break;
        }
    }
    return res;
}

// ---------------------------------------------------------------- evaluation

inline std::string sequence_of(const MolecularGraph& g) { return vocab::sequence_of(g.types()); }

/// Per-case metrics of generated binders against the reference complex.
/// Generated binders are expressed in the reference site frame.
inline nlohmann::json evaluate_case(const ComplexRecord& ref, const std::vector<MolecularGraph>& generated) {
    const auto ref_inter = metrics::detect_interactions(ref.binder, ref.site);
    const std::string ref_seq = sequence_of(ref.binder);
    std::vector<double> aar, rmsd, ism, ito;
    std::vector<metrics::DesignSample> designs;
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& g : generated) {
        const std::string seq = sequence_of(g);
        const auto inter = metrics::detect_interactions(g, ref.site);
        aar.push_back(metrics::aar(seq, ref_seq));
        rmsd.push_back(metrics::rmsd_ca(g, ref.binder, ref.site, ref.site));
        ism.push_back(metrics::ism(inter, ref_inter));
        ito.push_back(metrics::ito(inter, ref_inter));
        designs.push_back({seq, g.ca_coords()});
        auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
        samples.push_back({{"sequence", seq}, {"aar", aar.back()}, {"rmsd", rmsd.back()}, {"ism", num(ism.back())}, {"ito", num(ito.back())}});
    }
    nlohmann::json out = {{"id", ref.id}, {"reference_sequence", ref_seq}, {"reference_interactions", ref_inter.size()}, {"samples", samples}};
    out["aar"] = metrics::to_json(metrics::aggregate(aar));
    out["rmsd"] = metrics::to_json(metrics::aggregate(rmsd));
    out["ism"] = metrics::to_json(metrics::aggregate(ism));
    out["ito"] = metrics::to_json(metrics::aggregate(ito));
    if (!designs.empty()) {
        out["diversity_sequence"] = metrics::diversity(designs, metrics::DiversityCriterion::sequence);
        out["diversity_structure"] = metrics::diversity(designs, metrics::DiversityCriterion::structure);
    }
    return out;
}

inline constexpr int kReportSchemaVersion = 1;

/// Report over all cases: per-case values plus means over cases with
/// NaN-exclusion counts.
inline nlohmann::json evaluation_report(const std::vector<nlohmann::json>& cases) {
    nlohmann::json report = {{"schema_version", kReportSchemaVersion}, {"cases", cases}};
    nlohmann::json agg = nlohmann::json::object();
    for (const char* key : {"aar", "rmsd", "ism", "ito"}) {
        std::vector<double> values;
        for (const auto& c : cases) values.push_back(c[key]["mean"].is_null() ? std::nan("") : c[key]["mean"].get<double>());
        agg[key] = metrics::to_json(metrics::aggregate(values));
    }
    for (const char* key : {"diversity_sequence", "diversity_structure"}) {
        std::vector<double> values;
        for (const auto& c : cases) {
            if (c.contains(key)) values.push_back(c[key].get<double>());
        }
        agg[key] = metrics::to_json(metrics::aggregate(values));
    }
    report["aggregate"] = agg;
    return report;
}

/// Fraction of positions whose block type matches the reference.
inline double type_recovery(const MolecularGraph& gen, const MolecularGraph& ref) {
    if (gen.blocks.size() != ref.blocks.size() || ref.blocks.empty()) throw std::invalid_argument("type_recovery: length mismatch");
    int same = 0;
    for (std::size_t i = 0; i < ref.blocks.size(); ++i) same += gen.blocks[i].block_type == ref.blocks[i].block_type;
    return static_cast<double>(same) / static_cast<double>(ref.blocks.size());
}

}  // namespace radiance::pipeline
