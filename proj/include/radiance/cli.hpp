#pragma once

// Command-line front end. `dispatch` parses arguments, runs one subcommand and
// returns the process exit code: 0 on success, 1 on a runtime failure (JSON
// error on stdout), 2 on a usage error (usage text on stderr).

#include "radiance/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace radiance::cli {

namespace fs = std::filesystem;

inline constexpr int kSummarySchemaVersion = 1;

namespace detail {

struct Common {
    std::string config_file;
    std::optional<std::uint64_t> seed;
    bool deterministic = false;
    std::vector<std::string> sets;  // key=value overrides
};

inline pipeline::RunConfig resolve_unchecked(const Common& c, const std::map<std::string, nlohmann::json>& flags) {
    pipeline::RunConfig cfg;
    if (!c.config_file.empty()) cfg = pipeline::load_config_file(c.config_file);
    std::vector<std::pair<std::string, nlohmann::json>> kv;
    for (const auto& s : c.sets) {
        const auto parsed = pipeline::parse_flat_config(s);
        kv.insert(kv.end(), parsed.begin(), parsed.end());
    }
    for (const auto& [k, v] : flags) kv.emplace_back(k, v);
    if (c.seed) kv.emplace_back("seed", *c.seed);
    if (c.deterministic) kv.emplace_back("deterministic", true);
    return pipeline::apply_overrides(cfg, kv);
}

inline pipeline::RunConfig resolve(const Common& c, const std::map<std::string, nlohmann::json>& flags = {}) {
    try {
        return resolve_unchecked(c, flags);
    } catch (const std::invalid_argument& e) {
        throw CLI::ValidationError("--config/--set", e.what());
    } catch (const nlohmann::json::exception& e) {
        throw CLI::ValidationError("--config/--set", e.what());
    }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    return j;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

/// A site file is either a complex (site and reference binder) or a bare graph.
struct SiteInput {
    std::string id;
    MolecularGraph site;
    int reference_length = 0;
};

inline SiteInput read_site(const fs::path& path) {
    const auto j = read_json(path);
    if (j.contains("site") && j.contains("binder")) {
        const auto rec = complex_from_json(j);
        return {rec.id, rec.site, static_cast<int>(rec.binder.blocks.size())};
    }
    std::string stem = path.filename().string();
    stem = stem.substr(0, stem.find('.'));
    return {stem, graph_from_json(j), 0};
}

struct Loaded {
    std::unique_ptr<cvae::CvaeModel> vae;
    std::unique_ptr<ldm::Denoiser> ldm;
};

inline Loaded load_models(const std::string& path, bool need_ldm) {
    const auto a = ckpt::load(path);
    Loaded l;
    l.vae = pipeline::vae_from_archive(a);
    if (need_ldm) {
        if (!a.has_section(pipeline::kLdmSection)) throw std::runtime_error(path + " has no diffusion model; run train-ldm first");
        l.ldm = pipeline::ldm_from_archive(a);
    }
    return l;
}

inline void write_sample(const fs::path& dir, int k, const MolecularGraph& binder, const MolecularGraph& site) {
    fs::create_directories(dir);
    const std::string stem = "sample_" + std::to_string(k);
    {
        std::ofstream out(dir / (stem + ".json"));
        out << to_json(binder).dump() << "\n";
    }
    ComplexRecord rec;
    rec.id = stem;
    rec.binder = binder;
    rec.site = site;
    std::ofstream pdb(dir / (stem + ".pdb"));
    pdb << to_pdb(rec);
}

}  // namespace detail

/// Runs the command line in `args` (args[0] is the program name).
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace detail;
    CLI::App app{"Retrieval-augmented binder design", "radiance"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--config", common.config_file, "flat key = value configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", common.seed, "seed for every random stream");
    app.add_flag("--deterministic", common.deterministic, "serial execution");
    app.add_option("--set", common.sets, "override a configuration key, e.g. --set cvae.hidden_size=64");

    nlohmann::json summary;
    std::function<void()> action;

    // prepare
    auto* prepare = app.add_subcommand("prepare", "build a dataset of prepared complexes");
    std::string prep_out;
    int synthetic = 0, families = 0, members = 0;
    std::vector<std::string> pdbs;
    std::string binder_chains, target_chains;
    double test_fraction = 0.1;
    prepare->add_option("--out", prep_out, "output directory")->required();
    prepare->add_option("--synthetic", synthetic, "number of toy complexes");
    prepare->add_option("--families", families, "number of toy families of near-duplicate interfaces");
    prepare->add_option("--members", members, "members per family");
    prepare->add_option("--pdb", pdbs, "PDB files")->check(CLI::ExistingFile);
    prepare->add_option("--binder-chains", binder_chains, "comma-separated binder chain ids");
    prepare->add_option("--target-chains", target_chains, "comma-separated target chain ids");
    prepare->add_option("--test-fraction", test_fraction, "share of complexes held out into test/")->check(CLI::Range(0.0, 0.99));
    prepare->callback([&] {
        action = [&] {
            const auto cfg = resolve(common);
            std::vector<ComplexRecord> records;
            if (synthetic > 0) {
                for (auto& r : pipeline::synthetic_dataset(synthetic, cfg.seed)) records.push_back(std::move(r));
            }
            if (families > 0) {
                if (members < 1) throw CLI::ValidationError("--members", "must be >= 1 with --families");
                for (auto& r : pipeline::synthetic_families(families, members, Rng(cfg.seed).split(1).engine()())) records.push_back(std::move(r));
            }
            if (!pdbs.empty()) {
                if (binder_chains.empty() || target_chains.empty()) throw CLI::ValidationError("--binder-chains", "required with --pdb");
                for (const auto& p : pdbs) {
                    records.push_back(prepare_complex(parse_pdb(p, split_list(binder_chains), split_list(target_chains)), 10.0, cfg.cvae.k_neighbors));
                }
            }
            if (records.empty()) throw CLI::ValidationError("prepare", "give --synthetic, --families or --pdb");
            auto [train, test] = pipeline::split_dataset(std::move(records), test_fraction, cfg.seed);
            pipeline::save_dataset(train, fs::path(prep_out) / "train");
            pipeline::save_dataset(test, fs::path(prep_out) / "test");
            pipeline::write_config(cfg, prep_out);
            summary = {{"train", train.size()}, {"test", test.size()}, {"out", prep_out}};
        };
    });

    // train-vae
    auto* train_vae = app.add_subcommand("train-vae", "train the contrastive VAE");
    std::string vae_data, vae_out;
    std::optional<int> vae_epochs;
    train_vae->add_option("--data", vae_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    train_vae->add_option("--out", vae_out, "output directory")->required();
    train_vae->add_option("--epochs", vae_epochs, "training epochs");
    train_vae->callback([&] {
        action = [&] {
            std::map<std::string, nlohmann::json> flags;
            if (vae_epochs) flags["vae_epochs"] = *vae_epochs;
            const auto cfg = resolve(common, flags);
            const auto data = pipeline::load_dataset(vae_data);
            auto [train, held] = pipeline::split_dataset(data, data.size() >= 5 ? cfg.holdout_fraction : 0.0, cfg.seed);
            pipeline::write_config(cfg, vae_out);
            pipeline::JsonlLog log(fs::path(vae_out) / "vae_log.jsonl");
            const auto run = pipeline::train_vae(cfg, train, held, &log);
            ckpt::save(pipeline::vae_archive(*run.model), (fs::path(vae_out) / "vae.ckpt").string());
            summary = {{"checkpoint", (fs::path(vae_out) / "vae.ckpt").string()}, {"train", train.size()}, {"heldout", held.size()}};
            if (!run.train_reports.empty()) summary["final_train"] = cvae::to_json(run.train_reports.back());
            if (!run.heldout_reports.empty()) {
                summary["first_heldout_total"] = run.heldout_reports.front().total;
                summary["final_heldout_total"] = run.heldout_reports.back().total;
            }
        };
    });

    // build-db
    auto* build_db = app.add_subcommand("build-db", "encode a dataset into a retrieval database");
    std::string bd_ckpt, bd_data, bd_out;
    build_db->add_option("--checkpoint", bd_ckpt, "VAE checkpoint")->required()->check(CLI::ExistingFile);
    build_db->add_option("--data", bd_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    build_db->add_option("--out", bd_out, "database file")->required();
    build_db->callback([&] {
        action = [&] {
            const auto cfg = resolve(common);
            const auto models = load_models(bd_ckpt, false);
            const auto enc = pipeline::encode_database(*models.vae, pipeline::load_dataset(bd_data));
            const fs::path out_path(bd_out);
            pipeline::write_config(cfg, out_path.has_parent_path() ? out_path.parent_path() : fs::path("."));
            db::save(enc.database, bd_out);
            summary = {{"db", bd_out}, {"entries", enc.database.size()}, {"failed", enc.failed_ids.size()}, {"failed_ids", enc.failed_ids}};
        };
    });

    // train-ldm
    auto* train_ldm = app.add_subcommand("train-ldm", "train the retrieval-conditioned latent diffusion model");
    std::string tl_ckpt, tl_db, tl_data, tl_out;
    std::optional<int> ldm_epochs;
    train_ldm->add_option("--checkpoint", tl_ckpt, "VAE checkpoint")->required()->check(CLI::ExistingFile);
    train_ldm->add_option("--db", tl_db, "database file")->required()->check(CLI::ExistingFile);
    train_ldm->add_option("--data", tl_data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    train_ldm->add_option("--out", tl_out, "output directory")->required();
    train_ldm->add_option("--epochs", ldm_epochs, "training epochs");
    train_ldm->callback([&] {
        action = [&] {
            std::map<std::string, nlohmann::json> flags;
            if (ldm_epochs) flags["ldm_epochs"] = *ldm_epochs;
            auto cfg = resolve(common, flags);
            const auto archive = ckpt::load(tl_ckpt);
            const auto vae = pipeline::vae_from_archive(archive);
            if (cfg.ldm.prompt_dim != vae->config().hidden_size || cfg.cvae.hidden_size != vae->config().hidden_size) {
                throw std::runtime_error("configuration does not match the VAE checkpoint (cvae.hidden_size " +
                                         std::to_string(vae->config().hidden_size) + ")");
            }
            const auto database = db::load(tl_db);
            pipeline::write_config(cfg, tl_out);
            pipeline::JsonlLog log(fs::path(tl_out) / "ldm_log.jsonl");
            const auto run = pipeline::train_ldm(cfg, *vae, pipeline::load_dataset(tl_data), database, &log);
            ckpt::Archive out_archive;
            out_archive.copy_section(archive, pipeline::kVaeSection);
            out_archive.add_section(pipeline::kLdmSection, run.model->params(), nlohmann::json(run.model->config()));
            out_archive.manifest["retrieval"] = cfg.retrieval.to_json();
            ckpt::save(out_archive, (fs::path(tl_out) / "model.ckpt").string());
            summary = {{"checkpoint", (fs::path(tl_out) / "model.ckpt").string()}, {"epoch_losses", run.epoch_losses}};
        };
    });

    // retrieve
    auto* retrieve = app.add_subcommand("retrieve", "query a database");
    std::string rq_db, rq_query, rq_ckpt, rq_mode = "topN";
    int rq_k = 10;
    std::optional<double> rq_threshold;
    std::vector<std::string> rq_exclude;
    retrieve->add_option("--db", rq_db, "database file")->required()->check(CLI::ExistingFile);
    retrieve->add_option("--query", rq_query, "JSON with a \"key\" array, a site graph or a complex")->required()->check(CLI::ExistingFile);
    retrieve->add_option("--checkpoint", rq_ckpt, "VAE checkpoint, needed to encode a graph query")->check(CLI::ExistingFile);
    retrieve->add_option("--k", rq_k, "number of entries")->check(CLI::NonNegativeNumber);
    retrieve->add_option("--mode", rq_mode, "topN, reverseN or random")->check(CLI::IsMember({"topN", "reverseN", "random"}));
    retrieve->add_option("--threshold", rq_threshold, "adaptive retrieval: keep every entry scoring at least this");
    retrieve->add_option("--exclude", rq_exclude, "entry ids to leave out");
    retrieve->callback([&] {
        action = [&] {
            const auto cfg = resolve(common);
            const auto database = db::load(rq_db);
            const auto j = read_json(rq_query);
            Eigen::VectorXd key;
            if (j.contains("key")) {
                const auto v = j["key"].get<std::vector<double>>();
                key = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
            } else {
                if (rq_ckpt.empty()) throw CLI::RequiredError("--checkpoint (the query is a graph)");
                const auto models = load_models(rq_ckpt, false);
                auto site = read_site(rq_query).site;
                if (site.edges.empty()) site = build_block_graph(std::move(site), models.vae->config().k_neighbors);
                key = models.vae->encode(site).second.vec;
            }
            ldm::RetrievalSettings rs;
            rs.mode = db::mode_from_string(rq_mode);
            rs.n = rq_k;
            rs.threshold = rq_threshold;
            Rng rng(cfg.seed);
            const auto r = ldm::retrieve(database, key, rs, {rq_exclude.begin(), rq_exclude.end()}, rng);
            summary = {{"ids", r.entry_ids}, {"scores", r.scores}, {"mode", rq_mode}};
        };
    });

    // generate
    auto* gen = app.add_subcommand("generate", "design binders for binding sites");
    std::string g_ckpt, g_db, g_site, g_data, g_out;
    std::optional<int> g_n, g_len;
    bool g_exclude_self = false;
    gen->add_option("--checkpoint", g_ckpt, "model checkpoint from train-ldm")->required()->check(CLI::ExistingFile);
    gen->add_option("--db", g_db, "database file")->required()->check(CLI::ExistingFile);
    auto* site_opt = gen->add_option("--site", g_site, "complex or site graph JSON")->check(CLI::ExistingFile);
    auto* data_opt = gen->add_option("--data", g_data, "dataset directory; designs for every complex")->check(CLI::ExistingDirectory);
    site_opt->excludes(data_opt);
    gen->add_option("--out", g_out, "output directory")->required();
    gen->add_option("--n-samples", g_n, "designs per site");
    gen->add_option("--binder-length", g_len, "binder blocks (default: copy the reference)");
    gen->add_flag("--exclude-self", g_exclude_self, "leave a site's own id out of retrieval");
    gen->callback([&] {
        action = [&] {
            if (g_site.empty() && g_data.empty()) throw CLI::RequiredError("--site or --data");
            std::map<std::string, nlohmann::json> flags;
            if (g_n) flags["n_samples"] = *g_n;
            if (g_len) flags["binder_length"] = *g_len;
            const auto cfg = resolve(common, flags);
            const auto models = load_models(g_ckpt, true);
            const auto database = db::load(g_db);
            std::vector<SiteInput> sites;
            if (!g_site.empty()) {
                sites.push_back(read_site(g_site));
            } else {
                for (const auto& rec : pipeline::load_dataset(g_data)) sites.push_back({rec.id, rec.site, static_cast<int>(rec.binder.blocks.size())});
            }
            pipeline::write_config(cfg, g_out);
            nlohmann::json cases = nlohmann::json::array();
            for (std::size_t c = 0; c < sites.size(); ++c) {
                const auto& s = sites[c];
                const int len = cfg.binder_length > 0 ? cfg.binder_length : s.reference_length;
                if (len < 1) throw std::runtime_error("binder length unknown for " + s.id + "; pass --binder-length");
                std::set<std::string> exclude;
                if (g_exclude_self) exclude.insert(s.id);
                std::vector<std::string> warnings;
                const std::uint64_t seed = Rng(cfg.seed).split(ldm::stable_hash(s.id)).engine()();
                const auto samples = pipeline::generate(*models.vae, *models.ldm, database, s.site, cfg, cfg.n_samples, len, seed, exclude, &warnings);
                const fs::path dir = fs::path(g_out) / s.id;
                nlohmann::json prov = nlohmann::json::array();
                for (std::size_t k = 0; k < samples.size(); ++k) {
                    write_sample(dir, static_cast<int>(k), samples[k].binder, s.site);
                    prov.push_back({{"sample", k}, {"stream", samples[k].seed}, {"retrieved", pipeline::to_json(samples[k].provenance)}});
                }
                write_json(dir / "provenance.json", {{"id", s.id}, {"binder_length", len}, {"warnings", warnings}, {"samples", prov}});
                cases.push_back({{"id", s.id}, {"samples", samples.size()}});
            }
            summary = {{"out", g_out}, {"cases", cases}};
        };
    });

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "score generated binders against references");
    std::string e_ref, e_gen, e_out;
    evaluate->add_option("--ref", e_ref, "reference dataset directory")->required()->check(CLI::ExistingDirectory);
    evaluate->add_option("--gen", e_gen, "directory written by generate")->required()->check(CLI::ExistingDirectory);
    evaluate->add_option("--out", e_out, "report file")->required();
    evaluate->callback([&] {
        action = [&] {
            const auto cfg = resolve(common);
            std::vector<nlohmann::json> cases;
            for (const auto& ref : pipeline::load_dataset(e_ref)) {
                const fs::path dir = fs::path(e_gen) / ref.id;
                if (!fs::is_directory(dir)) continue;
                std::vector<MolecularGraph> gen_graphs;
                for (int k = 0;; ++k) {
                    const fs::path f = dir / ("sample_" + std::to_string(k) + ".json");
                    if (!fs::exists(f)) break;
                    gen_graphs.push_back(graph_from_json(read_json(f)));
                }
                if (!gen_graphs.empty()) cases.push_back(pipeline::evaluate_case(ref, gen_graphs));
            }
            if (cases.empty()) throw std::runtime_error("no generated cases found under " + e_gen + " matching " + e_ref);
            const auto report = pipeline::evaluation_report(cases);
            write_json(e_out, report);
            const fs::path out_path(e_out);
            pipeline::write_config(cfg, out_path.has_parent_path() ? out_path.parent_path() : fs::path("."));
            summary = {{"report", e_out}, {"cases", cases.size()}, {"aggregate", report["aggregate"]}};
        };
    });

    // redesign
    auto* redesign = app.add_subcommand("redesign", "iterative region redesign with a scorer");
    std::string rd_ckpt, rd_db, rd_complex, rd_regions, rd_out;
    std::optional<int> rd_rounds;
    redesign->add_option("--checkpoint", rd_ckpt, "model checkpoint from train-ldm")->required()->check(CLI::ExistingFile);
    redesign->add_option("--db", rd_db, "database file")->required()->check(CLI::ExistingFile);
    redesign->add_option("--complex", rd_complex, "framework complex JSON")->required()->check(CLI::ExistingFile);
    redesign->add_option("--regions", rd_regions, "designable block spans, e.g. 0-2,5-7")->required();
    redesign->add_option("--rounds", rd_rounds, "redesign rounds");
    redesign->add_option("--out", rd_out, "output directory")->required();
    redesign->callback([&] {
        action = [&] {
            std::map<std::string, nlohmann::json> flags;
            if (rd_rounds) flags["redesign_rounds"] = *rd_rounds;
            const auto cfg = resolve(common, flags);
            const auto models = load_models(rd_ckpt, true);
            const auto database = db::load(rd_db);
            const auto framework = load_complex(rd_complex);
            const auto regions = pipeline::parse_regions(rd_regions);
            pipeline::write_config(cfg, rd_out);
            const pipeline::ContactScorer scorer;
            const auto res = pipeline::iterative_redesign(*models.vae, *models.ldm, database, framework, regions, scorer, cfg, cfg.redesign_rounds, cfg.seed);
            pipeline::JsonlLog log(fs::path(rd_out) / "trajectory.jsonl");
            for (const auto& e : res.trajectory) log.write(pipeline::to_json(e));
            save_complex(res.best, (fs::path(rd_out) / "best.complex.json").string());
            summary = {{"scorer", scorer.name()}, {"best_score", res.best_score}, {"events", res.trajectory.size()}, {"out", rd_out}};
        };
    });

    try {
        std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
        std::reverse(rev.begin(), rev.end());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n\n" << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return 2;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    try {
        action();
    } catch (const CLI::Error& e) {
        err << "error: " << e.what() << "\n\n" << app.get_subcommands().front()->help();
        return 2;
    } catch (const std::exception& e) {
        out << nlohmann::json{{"schema_version", kSummarySchemaVersion}, {"command", command}, {"ok", false},
                              {"error", {{"message", e.what()}}}}
                   .dump()
            << "\n";
        err << "error: " << e.what() << "\n";
        return 1;
    }
    summary["schema_version"] = kSummarySchemaVersion;
    summary["command"] = command;
    summary["ok"] = true;
    out << summary.dump() << "\n";
    return 0;
}

}  // namespace radiance::cli
