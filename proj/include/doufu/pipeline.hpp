#pragma once

// Experiment orchestration: INI config, workspace stages with hashed manifests, and the
// glue that turns cached features into model samples and embeddings into reports.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "doufu/evalkit.hpp"
#include "doufu/features.hpp"
#include "doufu/model.hpp"
#include "doufu/roadgraph.hpp"
#include "doufu/synthgen.hpp"

namespace doufu::pipeline {

namespace fs = std::filesystem;
using nn::Tensor;

enum class Split { trajectories, users };

struct ExperimentConfig {
    synth::NetworkSpec network;
    int users = 20;
    int per_user = 30;
    double sample_period_s = 10.0;
    synth::GeneratorOptions generator;
    std::uint64_t synth_seed = 0;

    features::FeatureConfig features;
    graph::VgaeConfig vgae;

    model::ModelConfig model;
    std::vector<model::Variant> variants{model::all_variants.begin(), model::all_variants.end()};

    std::size_t folds = 10;
    std::vector<eval::Learner> learners{eval::all_learners.begin(), eval::all_learners.end()};
    Split split = Split::trajectories;
    double train_fraction = 2.0 / 3.0; ///< per user, when splitting trajectories
    std::size_t test_users = 4;        ///< when splitting users
    std::uint64_t eval_seed = 0;

    fs::path workspace = "workspace";
};

// ---------------------------------------------------------------------------
// Config binding: one table drives parsing, defaults echo and per-stage hashing.

namespace detail {

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream ss(v);
    T out{};
    ss >> out;
    if (!ss || !(ss >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + v + "'");
    if constexpr (std::is_unsigned_v<T>)
        if (v.find('-') != std::string::npos) throw ConfigError(key + ": must be non-negative, got '" + v + "'");
    return out;
}

template <class T>
std::string show(T v) {
    if constexpr (std::is_floating_point_v<T>)
        return format_double(v);
    else
        return std::to_string(v);
}

template <class T, class Get>
Field number(std::string section, std::string key, Get member) {
    const std::string name = section + "." + key;
    return {section, key, [member](const ExperimentConfig& c) { return show<T>(member(const_cast<ExperimentConfig&>(c))); },
            [member, name](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<T>(name, v); }};
}

inline std::vector<std::string> list(const std::string& v) {
    std::vector<std::string> out;
    for (const auto& s : split(v, ',')) {
        auto t = std::string(trim(s));
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

inline const std::vector<Field>& fields() {
    using C = ExperimentConfig;
    static const std::vector<Field> table = {
        number<int>("synthgen", "grid_rows", [](C& c) -> int& { return c.network.grid_rows; }),
        number<int>("synthgen", "grid_cols", [](C& c) -> int& { return c.network.grid_cols; }),
        number<double>("synthgen", "cell_m", [](C& c) -> double& { return c.network.cell_m; }),
        number<int>("synthgen", "arterial_every", [](C& c) -> int& { return c.network.arterial_every; }),
        number<std::uint64_t>("synthgen", "zone_seed", [](C& c) -> std::uint64_t& { return c.network.zone_seed; }),
        number<std::uint64_t>("synthgen", "class_seed", [](C& c) -> std::uint64_t& { return c.network.class_seed; }),
        number<int>("synthgen", "users", [](C& c) -> int& { return c.users; }),
        number<int>("synthgen", "per_user", [](C& c) -> int& { return c.per_user; }),
        number<double>("synthgen", "sample_period_s", [](C& c) -> double& { return c.sample_period_s; }),
        number<double>("synthgen", "gps_noise_m", [](C& c) -> double& { return c.generator.gps_noise_m; }),
        number<int>("synthgen", "min_route_segments", [](C& c) -> int& { return c.generator.min_route_segments; }),
        number<std::uint64_t>("synthgen", "seed", [](C& c) -> std::uint64_t& { return c.synth_seed; }),

        number<std::size_t>("features", "window", [](C& c) -> std::size_t& { return c.features.window; }),
        number<std::size_t>("features", "stride", [](C& c) -> std::size_t& { return c.features.stride; }),
        number<double>("features", "buffer_m", [](C& c) -> double& { return c.features.buffer_m; }),

        number<std::size_t>("roadgraph", "d_z", [](C& c) -> std::size_t& { return c.vgae.d_z; }),
        number<std::size_t>("roadgraph", "hidden", [](C& c) -> std::size_t& { return c.vgae.hidden; }),
        number<int>("roadgraph", "epochs", [](C& c) -> int& { return c.vgae.epochs; }),
        number<double>("roadgraph", "lr", [](C& c) -> double& { return c.vgae.lr; }),
        number<std::uint64_t>("roadgraph", "seed", [](C& c) -> std::uint64_t& { return c.vgae.seed; }),

        {"model", "variants",
         [](const C& c) {
             std::string s;
             for (auto v : c.variants) s += (s.empty() ? "" : ",") + model::variant_name(v);
             return s;
         },
         [](C& c, const std::string& v) {
             c.variants.clear();
             try {
                 for (const auto& name : list(v)) c.variants.push_back(model::parse_variant(name));
             } catch (const ValidationError& e) {
                 throw ConfigError(std::string("model.variants: ") + e.what());
             }
         }},
        number<std::size_t>("model", "d", [](C& c) -> std::size_t& { return c.model.d; }),
        number<std::size_t>("model", "heads", [](C& c) -> std::size_t& { return c.model.heads; }),
        number<std::size_t>("model", "ff", [](C& c) -> std::size_t& { return c.model.ff; }),
        number<std::size_t>("model", "depth", [](C& c) -> std::size_t& { return c.model.depth; }),
        number<std::size_t>("model", "L_r_max", [](C& c) -> std::size_t& { return c.model.L_r_max; }),
        number<std::size_t>("model", "L_m_max", [](C& c) -> std::size_t& { return c.model.L_m_max; }),
        number<std::size_t>("model", "n_reduce", [](C& c) -> std::size_t& { return c.model.n_reduce; }),
        number<std::size_t>("model", "reduce_hidden", [](C& c) -> std::size_t& { return c.model.reduce_hidden; }),
        number<std::size_t>("model", "global_hidden", [](C& c) -> std::size_t& { return c.model.global_hidden; }),
        number<std::size_t>("model", "embed_dim", [](C& c) -> std::size_t& { return c.model.embed_dim; }),
        number<double>("model", "alpha", [](C& c) -> double& { return c.model.alpha; }),
        number<double>("model", "beta", [](C& c) -> double& { return c.model.beta; }),
        number<int>("model", "epochs", [](C& c) -> int& { return c.model.epochs; }),
        number<double>("model", "lr", [](C& c) -> double& { return c.model.lr; }),
        number<std::size_t>("model", "batch", [](C& c) -> std::size_t& { return c.model.batch; }),
        number<double>("model", "dropout", [](C& c) -> double& { return c.model.dropout; }),
        number<std::uint64_t>("model", "seed", [](C& c) -> std::uint64_t& { return c.model.seed; }),

        number<std::size_t>("eval", "folds", [](C& c) -> std::size_t& { return c.folds; }),
        {"eval", "learners",
         [](const C& c) {
             std::string s;
             for (auto l : c.learners) s += (s.empty() ? "" : ",") + eval::learner_name(l);
             return s;
         },
         [](C& c, const std::string& v) {
             c.learners.clear();
             try {
                 for (const auto& name : list(v)) c.learners.push_back(eval::parse_learner(name));
             } catch (const ValidationError& e) {
                 throw ConfigError(std::string("eval.learners: ") + e.what());
             }
         }},
        {"eval", "split", [](const C& c) { return std::string(c.split == Split::users ? "users" : "trajectories"); },
         [](C& c, const std::string& v) {
             if (v == "users")
                 c.split = Split::users;
             else if (v == "trajectories")
                 c.split = Split::trajectories;
             else
                 throw ConfigError("eval.split: expected 'users' or 'trajectories', got '" + v + "'");
         }},
        number<double>("eval", "train_fraction", [](C& c) -> double& { return c.train_fraction; }),
        number<std::size_t>("eval", "test_users", [](C& c) -> std::size_t& { return c.test_users; }),
        number<std::uint64_t>("eval", "seed", [](C& c) -> std::uint64_t& { return c.eval_seed; }),

        {"paths", "workspace", [](const C& c) { return c.workspace.string(); },
         [](C& c, const std::string& v) { c.workspace = v; }},
    };
    return table;
}

} // namespace detail

inline void validate(const ExperimentConfig& c) {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    check(c.network.grid_rows >= 2 && c.network.grid_cols >= 2, "synthgen.grid_rows/grid_cols: need at least a 2x2 grid");
    check(c.network.cell_m > 0, "synthgen.cell_m: must be positive");
    check(c.network.arterial_every >= 1, "synthgen.arterial_every: must be >= 1");
    check(c.users >= 2, "synthgen.users: need at least 2 users");
    check(c.per_user >= 1, "synthgen.per_user: must be >= 1");
    check(c.sample_period_s > 0, "synthgen.sample_period_s: must be positive");
    check(c.generator.gps_noise_m >= 0, "synthgen.gps_noise_m: must be >= 0");
    check(c.features.window >= 2 && c.features.stride >= 1, "features.window/stride: need window >= 2 and stride >= 1");
    check(c.features.buffer_m > 0, "features.buffer_m: must be positive");
    check(!c.variants.empty(), "model.variants: list at least one variant");
    check(!c.learners.empty(), "eval.learners: list at least one learner");
    check(c.folds >= 2, "eval.folds: must be >= 2");
    check(c.train_fraction > 0 && c.train_fraction < 1, "eval.train_fraction: must lie in (0, 1)");
    if (c.split == Split::users)
        check(c.test_users >= 2 && c.test_users + 2 <= static_cast<std::size_t>(c.users),
              "eval.test_users: need >= 2 test users and >= 2 training users");
    check(!c.workspace.empty(), "paths.workspace: must be set");
    try {
        graph::validate(c.vgae);
        model::validate(c.model);
    } catch (const ValidationError& e) {
        throw ConfigError(e.field() + ": " + e.what());
    }
}

/// Reads an INI file; unknown sections or keys are rejected. DOUFU_WORKSPACE overrides paths.workspace.
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "config") {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    ExperimentConfig cfg;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) throw ConfigError(source + ": key '" + section + "' outside a section");
        for (const auto& [key, value] : body) {
            auto it = std::find_if(detail::fields().begin(), detail::fields().end(),
                                   [&](const detail::Field& f) { return f.section == section && f.key == key; });
            if (it == detail::fields().end()) throw ConfigError(source + ": unknown setting " + section + "." + key);
            it->set(cfg, std::string(trim(value.data())));
        }
    }
    if (const char* ws = std::getenv("DOUFU_WORKSPACE"); ws && *ws) cfg.workspace = ws;
    validate(cfg);
    return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    return parse_config(in, path.string());
}

/// Every setting, one `section.key=value` per line, in table order.
inline std::string dump_config(const ExperimentConfig& c, const std::set<std::string>& sections = {}) {
    std::string out;
    for (const auto& f : detail::fields())
        if (f.section != "paths" && (sections.empty() || sections.count(f.section)))
            out += f.section + "." + f.key + "=" + f.get(c) + "\n";
    return out;
}

inline std::string write_ini(const ExperimentConfig& c) {
    std::string out, current;
    for (const auto& f : detail::fields()) {
        if (f.section != current) {
            out += (current.empty() ? "" : "\n") + ("[" + f.section + "]\n");
            current = f.section;
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stages and manifests

enum class Stage { gen, featurize, pretrain, train, embed, eval };

inline std::string stage_name(Stage s) {
    switch (s) {
    case Stage::gen: return "gen";
    case Stage::featurize: return "featurize";
    case Stage::pretrain: return "pretrain";
    case Stage::train: return "train";
    case Stage::embed: return "embed";
    default: return "eval";
    }
}

/// Config sections each stage's artifacts depend on (including upstream stages).
inline std::set<std::string> stage_sections(Stage s) {
    switch (s) {
    case Stage::gen: return {"synthgen"};
    case Stage::featurize: return {"synthgen", "features"};
    case Stage::pretrain: return {"synthgen", "features", "roadgraph"};
    default: return {"synthgen", "features", "roadgraph", "model", "eval"};
    }
}

inline std::string config_hash(const ExperimentConfig& c, Stage s) { return hex64(fnv1a(dump_config(c, stage_sections(s)))); }

struct Manifest {
    std::string stage;
    std::string config;
    std::map<std::string, std::string> outputs; ///< file name relative to the stage directory -> content hash
};

inline std::string format_manifest(const Manifest& m) {
    std::string out = "stage " + m.stage + "\nconfig " + m.config + "\n";
    for (const auto& [name, hash] : m.outputs) out += "output " + name + " " + hash + "\n";
    return out;
}

inline Manifest parse_manifest(const std::string& text) {
    Manifest m;
    std::size_t lineno = 0;
    for (const auto& line : split(text, '\n')) {
        ++lineno;
        if (trim(line).empty()) continue;
        auto f = split(trim(line), ' ');
        if (f.size() == 2 && f[0] == "stage")
            m.stage = f[1];
        else if (f.size() == 2 && f[0] == "config")
            m.config = f[1];
        else if (f.size() == 3 && f[0] == "output")
            m.outputs[f[1]] = f[2];
        else
            throw ParseError(lineno, "bad manifest line");
    }
    return m;
}

/// Owns the workspace for one run: `<workspace>/.lock` is created exclusively and removed on exit.
class WorkspaceLock {
public:
    explicit WorkspaceLock(const fs::path& ws) : path_(ws / ".lock") {
        fs::create_directories(ws);
        std::FILE* f = std::fopen(path_.string().c_str(), "wx");
        if (!f) throw Error("workspace " + ws.string() + " is locked by another run (remove " + path_.string() + " if stale)");
        std::fclose(f);
    }
    ~WorkspaceLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    fs::path path_;
};

class Workspace {
public:
    Workspace(const ExperimentConfig& cfg, std::ostream& log) : cfg_(cfg), log_(log) {}

    const ExperimentConfig& config() const { return cfg_; }
    std::ostream& log() const { return log_; }
    fs::path dir(Stage s) const { return cfg_.workspace / stage_name(s); }
    fs::path file(Stage s, const std::string& name) const { return dir(s) / name; }

    /// Throws MissingArtifactError unless stage `s` finished with the current config and its outputs are intact.
    void require(Stage s, const std::string& what) const {
        const auto path = file(s, "manifest");
        if (!fs::exists(path)) throw MissingArtifactError("missing " + what + ", run " + stage_name(s));
        const auto m = parse_manifest(read_file(path));
        if (m.config != config_hash(cfg_, s))
            throw MissingArtifactError("stale " + what + ": config changed since the last " + stage_name(s) + ", run " + stage_name(s));
        for (const auto& [name, hash] : m.outputs) {
            const auto p = file(s, name);
            if (!fs::exists(p)) throw MissingArtifactError("missing " + p.string() + ", run " + stage_name(s));
            if (hash_file(p) != hash)
                throw MissingArtifactError("stale " + p.string() + " (content changed after " + stage_name(s) + "), run " + stage_name(s));
        }
    }

    bool has_output(Stage s, const std::string& name) const {
        const auto path = file(s, "manifest");
        return fs::exists(path) && parse_manifest(read_file(path)).outputs.count(name) > 0;
    }

    /// Atomically writes `name` and records it for the stage manifest.
    void put(Stage s, const std::string& name, const std::string& contents) {
        write_file_atomic(file(s, name), contents);
        pending_[s][name] = hex64(fnv1a(contents));
    }

    /// Writes the manifest; `keep` merges entries of an existing manifest (per-variant stages).
    void commit(Stage s, bool keep = false) {
        Manifest m{stage_name(s), config_hash(cfg_, s), {}};
        const auto path = file(s, "manifest");
        if (keep && fs::exists(path)) {
            auto old = parse_manifest(read_file(path));
            if (old.config == m.config) m.outputs = old.outputs;
        }
        for (const auto& [k, v] : pending_[s]) m.outputs[k] = v;
        pending_.erase(s);
        write_file_atomic(path, format_manifest(m));
    }

private:
    const ExperimentConfig& cfg_;
    std::ostream& log_;
    std::map<Stage, std::map<std::string, std::string>> pending_;
};

template <class F>
auto read_stream(const fs::path& p, F&& parse) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingArtifactError("cannot open " + p.string());
    return parse(in);
}

// ---------------------------------------------------------------------------
// Feature extraction and sample preparation

/// Features of one trajectory, or nothing when it is too short for a single movement window.
inline std::optional<features::TrajectoryFeatures> extract(const Trajectory& traj, const Route& route, const RoadNetwork& net,
                                                           const features::FeatureConfig& fc) {
    auto series = features::kinematics(traj);
    if (features::window_count(series.size(), fc.window, fc.stride) == 0) return std::nullopt;
    return features::TrajectoryFeatures{traj.id, traj.user, features::movement_features(series, fc.window, fc.stride),
                                        features::route_features(route, net),
                                        features::global_features(traj, route, series, net, fc.buffer_m)};
}

struct SplitAssignment {
    std::vector<std::size_t> train, test; ///< record indices
};

/// Trajectory split: each user's trajectories are shuffled and the first train_fraction go to training.
/// User split: `test_users` users spread evenly over the sorted user list are held out entirely.
inline SplitAssignment split_records(const std::vector<features::TrajectoryFeatures>& records, const ExperimentConfig& cfg) {
    std::map<std::string, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < records.size(); ++i) by_user[records[i].user].push_back(i);
    SplitAssignment out;
    if (cfg.split == Split::users) {
        const std::size_t n = by_user.size();
        if (cfg.test_users + 2 > n) throw ConfigError("eval.test_users: only " + std::to_string(n) + " users have features");
        std::set<std::size_t> held;
        for (std::size_t i = 0; i < cfg.test_users; ++i) held.insert((2 * i + 1) * n / (2 * cfg.test_users));
        std::size_t u = 0;
        for (const auto& [user, idx] : by_user) {
            auto& dst = held.count(u++) ? out.test : out.train;
            dst.insert(dst.end(), idx.begin(), idx.end());
        }
    } else {
        for (auto [user, idx] : by_user) {
            Rng rng(derive_seed(cfg.eval_seed, fnv1a(user)));
            std::shuffle(idx.begin(), idx.end(), rng);
            const auto n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * static_cast<double>(idx.size())));
            out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
            out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    if (out.train.empty() || out.test.empty()) throw ConfigError("eval split leaves an empty training or test set");
    return out;
}

/// Z-score statistics for the three modalities, fitted on training records only.
struct Standardizers {
    features::Standardizer movement, route, global;
};

inline Standardizers fit_standardizers(const std::vector<features::TrajectoryFeatures>& records, const std::vector<std::size_t>& idx) {
    features::Rows m, r, g;
    for (auto i : idx) {
        m.insert(m.end(), records[i].movement.begin(), records[i].movement.end());
        r.insert(r.end(), records[i].route.begin(), records[i].route.end());
        g.push_back(records[i].global);
    }
    return {features::Standardizer::fit(m), features::Standardizer::fit(r), features::Standardizer::fit(g)};
}

inline std::string format_standardizers(const Standardizers& s) {
    std::ostringstream out;
    features::write_standardizer(out, "movement", s.movement);
    features::write_standardizer(out, "route", s.route);
    features::write_standardizer(out, "global", s.global);
    return out.str();
}

using RouteMap = std::map<std::string, Route>;

inline model::Sample make_sample(const features::TrajectoryFeatures& r, const RouteMap& routes, const graph::SegmentEmbeddingTable& table,
                                 const Standardizers& st, std::size_t label) {
    auto it = routes.find(r.traj_id);
    if (it == routes.end()) throw LookupError("no route recorded for trajectory " + r.traj_id);
    return {Tensor::from_rows(st.movement.apply(r.movement)), model::route_input(st.route.apply(r.route), it->second.segments, table),
            Tensor::from_rows({st.global.apply(r.global)}), label, r.traj_id, r.user};
}

struct Prepared {
    std::vector<model::Sample> train, test;
    std::vector<std::string> train_users; ///< label index -> user id
    model::InputDims dims;
    Standardizers standardizers;
};

inline Prepared prepare(const features::FeatureCache& cache, const RouteMap& routes, const graph::SegmentEmbeddingTable& table,
                        const ExperimentConfig& cfg) {
    if (table.empty()) throw ValidationError("embeddings", "segment embedding table is empty");
    const auto parts = split_records(cache.records, cfg);
    Prepared p;
    p.standardizers = fit_standardizers(cache.records, parts.train);
    std::map<std::string, std::size_t> label;
    for (auto i : parts.train) label.emplace(cache.records[i].user, 0);
    for (auto& [user, l] : label) {
        l = p.train_users.size();
        p.train_users.push_back(user);
    }
    for (auto i : parts.train) p.train.push_back(make_sample(cache.records[i], routes, table, p.standardizers, label.at(cache.records[i].user)));
    for (auto i : parts.test) {
        auto it = label.find(cache.records[i].user);
        p.test.push_back(make_sample(cache.records[i], routes, table, p.standardizers, it == label.end() ? 0 : it->second));
    }
    p.dims = {cache.movement_dim, cache.route_dim + table.begin()->second.size(), cache.global_dim};
    return p;
}

// ---------------------------------------------------------------------------
// Stage bodies

inline void run_gen(Workspace& ws) {
    const auto& c = ws.config();
    auto net = synth::generate_network(c.network);
    auto profiles = synth::default_profiles(c.users, c.synth_seed, c.network.zone_count);
    auto data = synth::generate_dataset(net, profiles, c.per_user, c.sample_period_s, derive_seed(c.synth_seed, 1), c.generator);
    std::ostringstream traj, network, routes;
    write_trajectories(traj, data.sets);
    write_network(network, net);
    write_routes(routes, data.routes);
    ws.put(Stage::gen, "trajectories.csv", traj.str());
    ws.put(Stage::gen, "network.csv", network.str());
    ws.put(Stage::gen, "routes.csv", routes.str());
    ws.commit(Stage::gen);
    ws.log() << "[gen] " << data.routes.size() << " trajectories from " << data.sets.size() << " users on " << net.size()
             << " segments\n";
}

inline RoadNetwork load_network(const Workspace& ws) {
    return read_stream(ws.file(Stage::gen, "network.csv"), [&](std::istream& in) { return parse_network(in, ws.config().network.class_count); });
}

inline void run_featurize(Workspace& ws) {
    ws.require(Stage::gen, "trajectories");
    const auto net = load_network(ws);
    const auto sets = read_stream(ws.file(Stage::gen, "trajectories.csv"), [](std::istream& in) { return parse_trajectories(in); });
    features::FeatureCache cache;
    cache.route_dim = features::route_dim(net.zone_count(), net.class_count());
    cache.global_dim = features::global_dim(net.zone_count());
    std::vector<std::pair<std::string, Route>> snapped;
    std::string skipped = "traj_id,reason\n";
    std::size_t n_skipped = 0;
    for (const auto& set : sets)
        for (const auto& traj : set.trajectories) {
            Route route;
            try {
                route = snap_to_route(traj, net);
            } catch (const UnmatchedPointError& e) {
                skipped += traj.id + ",unmatched point " + std::to_string(e.point_index()) + "\n";
                ++n_skipped;
                continue;
            }
            auto f = extract(traj, route, net, ws.config().features);
            if (!f) {
                skipped += traj.id + ",too short for one movement window\n";
                ++n_skipped;
                continue;
            }
            snapped.emplace_back(traj.id, route);
            cache.records.push_back(std::move(*f));
        }
    if (cache.records.empty()) throw ValidationError("trajectories", "no trajectory produced features");
    auto [manifest, bin] = features::encode_cache(cache);
    std::ostringstream routes;
    write_routes(routes, snapped);
    ws.put(Stage::featurize, "features.manifest", manifest);
    ws.put(Stage::featurize, "features.bin", bin);
    ws.put(Stage::featurize, "routes.csv", routes.str());
    ws.put(Stage::featurize, "skipped.csv", skipped);
    ws.commit(Stage::featurize);
    ws.log() << "[featurize] " << cache.records.size() << " trajectories featurized, " << n_skipped << " skipped\n";
}

inline features::FeatureCache load_features(const Workspace& ws) {
    return features::decode_cache(read_file(ws.file(Stage::featurize, "features.manifest")), read_file(ws.file(Stage::featurize, "features.bin")));
}

inline RouteMap load_routes(const Workspace& ws) {
    RouteMap out;
    for (auto& [id, r] : read_stream(ws.file(Stage::featurize, "routes.csv"), [](std::istream& in) { return parse_routes(in); }))
        out[id] = std::move(r);
    return out;
}

inline void run_pretrain(Workspace& ws) {
    ws.require(Stage::featurize, "snapped routes");
    const auto net = load_network(ws);
    std::vector<Route> routes;
    for (auto& [id, r] : load_routes(ws)) routes.push_back(r);
    const auto g = graph::build_graph(routes, net);
    const auto res = graph::pretrain(g, ws.config().vgae);
    std::ostringstream graph_out, vertices, emb, loss;
    graph::write_graph(graph_out, g);
    graph::write_vertices(vertices, g);
    graph::write_embeddings(emb, res.table);
    loss << "epoch,loss\n";
    for (std::size_t e = 0; e < res.losses.size(); ++e) loss << e << ',' << format_double(res.losses[e]) << '\n';
    ws.put(Stage::pretrain, "graph.csv", graph_out.str());
    ws.put(Stage::pretrain, "vertices.csv", vertices.str());
    ws.put(Stage::pretrain, "embeddings.csv", emb.str());
    ws.put(Stage::pretrain, "loss.csv", loss.str());
    ws.commit(Stage::pretrain);
    ws.log() << "[pretrain] graph with " << g.size() << " vertices and " << g.edges.size() << " edges";
    if (!res.losses.empty()) ws.log() << ", loss " << res.losses.front() << " -> " << res.losses.back();
    ws.log() << '\n';
}

inline Prepared load_prepared(const Workspace& ws) {
    ws.require(Stage::featurize, "features");
    ws.require(Stage::pretrain, "segment embeddings");
    const auto table = read_stream(ws.file(Stage::pretrain, "embeddings.csv"), [](std::istream& in) { return graph::read_embeddings(in); });
    return prepare(load_features(ws), load_routes(ws), table, ws.config());
}

inline model::ModelConfig variant_config(const ExperimentConfig& c, model::Variant v) {
    auto m = c.model;
    m.variant = v;
    return m;
}

inline std::vector<model::Variant> selected(const ExperimentConfig& c, const std::optional<model::Variant>& only) {
    if (!only) return c.variants;
    if (std::find(c.variants.begin(), c.variants.end(), *only) == c.variants.end())
        throw ConfigError("variant " + model::variant_name(*only) + " is not listed in model.variants");
    return {*only};
}

inline void run_train(Workspace& ws, const std::optional<model::Variant>& only = std::nullopt) {
    const auto data = load_prepared(ws);
    ws.put(Stage::train, "standardizers.txt", format_standardizers(data.standardizers));
    std::string users;
    for (std::size_t l = 0; l < data.train_users.size(); ++l) users += std::to_string(l) + "," + data.train_users[l] + "\n";
    ws.put(Stage::train, "labels.csv", "label,user_id\n" + users);
    for (auto v : selected(ws.config(), only)) {
        const auto mc = variant_config(ws.config(), v);
        model::DouFuModel m(mc, data.dims, data.train_users.size());
        const auto res = model::train(m, data.train);
        std::ostringstream ckpt, loss;
        nn::write_checkpoint(ckpt, m.store(), model::echo(mc));
        loss << "epoch,loss\n";
        for (std::size_t e = 0; e < res.history.size(); ++e) loss << e << ',' << format_double(res.history[e]) << '\n';
        ws.put(Stage::train, model::variant_name(v) + ".ckpt", ckpt.str());
        ws.put(Stage::train, model::variant_name(v) + ".loss.csv", loss.str());
        ws.log() << "[train] " << model::variant_name(v) << ": " << data.train.size() << " trajectories, " << mc.epochs << " epochs";
        if (!res.history.empty()) ws.log() << ", loss " << res.history.front() << " -> " << res.history.back();
        ws.log() << '\n';
    }
    ws.commit(Stage::train, only.has_value());
}

inline std::string format_embeddings(model::DouFuModel& m, const std::vector<model::Sample>& samples) {
    std::vector<model::EmbeddingRecord> rows;
    for (const auto& s : samples) rows.push_back({s.traj_id, s.user, m.embed(s)});
    std::ostringstream out;
    model::write_embeddings(out, rows);
    return out.str();
}

/// Embeds the test trajectories with the trained weights and with the untrained initialization.
inline void run_embed(Workspace& ws, const std::optional<model::Variant>& only = std::nullopt) {
    ws.require(Stage::train, "trained models");
    const auto data = load_prepared(ws);
    for (auto v : selected(ws.config(), only)) {
        const auto name = model::variant_name(v);
        if (!ws.has_output(Stage::train, name + ".ckpt")) throw MissingArtifactError("missing trained " + name + " model, run train");
        const auto mc = variant_config(ws.config(), v);
        model::DouFuModel untrained(mc, data.dims, data.train_users.size());
        ws.put(Stage::embed, name + ".untrained.csv", format_embeddings(untrained, data.test));
        model::DouFuModel trained(mc, data.dims, data.train_users.size());
        read_stream(ws.file(Stage::train, name + ".ckpt"), [&](std::istream& in) { return nn::read_checkpoint(in, trained.store()); });
        ws.put(Stage::embed, name + ".csv", format_embeddings(trained, data.test));
        ws.log() << "[embed] " << name << ": " << data.test.size() << " test trajectories\n";
    }
    ws.commit(Stage::embed, only.has_value());
}

struct LabeledEmbeddings {
    eval::Rows x;
    eval::Labels y;
};

inline LabeledEmbeddings load_labeled(const fs::path& p) {
    const auto rows = read_stream(p, [](std::istream& in) { return model::read_embeddings(in); });
    std::map<std::string, std::size_t> users;
    for (const auto& r : rows) users.emplace(r.user, 0);
    std::size_t next = 0;
    for (auto& [u, l] : users) l = next++;
    LabeledEmbeddings out;
    for (const auto& r : rows) {
        out.x.push_back(r.vec);
        out.y.push_back(users.at(r.user));
    }
    return out;
}

struct VariantReport {
    std::string variant;
    std::map<std::string, eval::ClassifyScore> learners;
    eval::ClusterScore trained, untrained;
};

inline VariantReport evaluate_variant(const Workspace& ws, model::Variant v) {
    const auto& c = ws.config();
    const auto name = model::variant_name(v);
    if (!ws.has_output(Stage::embed, name + ".csv")) throw MissingArtifactError("missing embeddings for " + name + ", run embed");
    const auto data = load_labeled(ws.file(Stage::embed, name + ".csv"));
    const auto base = load_labeled(ws.file(Stage::embed, name + ".untrained.csv"));
    VariantReport r{name, {}, eval::cluster_eval(data.x, data.y, c.eval_seed), eval::cluster_eval(base.x, base.y, c.eval_seed)};
    for (auto l : c.learners) r.learners[eval::learner_name(l)] = eval::kfold_classify(data.x, data.y, l, c.folds, c.eval_seed);
    return r;
}

inline std::vector<eval::ReportLine> report_lines(const std::vector<VariantReport>& reports, std::uint64_t seed) {
    std::vector<eval::ReportLine> lines;
    for (const auto& r : reports) {
        for (const auto& [l, s] : r.learners) {
            lines.push_back({r.variant, l + "_acc", s.acc, seed});
            lines.push_back({r.variant, l + "_f1", s.f1, seed});
        }
        lines.push_back({r.variant, "db", r.trained.db, seed});
        lines.push_back({r.variant, "nmi", r.trained.nmi, seed});
        lines.push_back({r.variant, "ari", r.trained.ari, seed});
        lines.push_back({r.variant, "untrained_db", r.untrained.db, seed});
        lines.push_back({r.variant, "untrained_nmi", r.untrained.nmi, seed});
        lines.push_back({r.variant, "untrained_ari", r.untrained.ari, seed});
    }
    return lines;
}

inline std::string report_table(const std::vector<VariantReport>& reports, const ExperimentConfig& c) {
    std::ostringstream out;
    out << "Evaluation: " << c.folds << "-fold stratified classification, k-means with k = number of test users, seed " << c.eval_seed << "\n\n";
    out << std::left << std::setw(18) << "variant";
    for (auto l : c.learners) out << std::setw(24) << (eval::learner_name(l) + " ACC/F1");
    out << std::setw(24) << "DB/NMI/ARI" << "untrained DB/NMI/ARI\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& r : reports) {
        out << std::setw(18) << r.variant;
        for (auto l : c.learners) {
            const auto& s = r.learners.at(eval::learner_name(l));
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(3) << s.acc << " / " << s.f1;
            out << std::setw(24) << cell.str();
        }
        std::ostringstream a, b;
        a << std::fixed << std::setprecision(3) << r.trained.db << " / " << r.trained.nmi << " / " << r.trained.ari;
        b << std::fixed << std::setprecision(3) << r.untrained.db << " / " << r.untrained.nmi << " / " << r.untrained.ari;
        out << std::setw(24) << a.str() << b.str() << '\n';
    }
    return out.str();
}

inline std::string report_csv(const std::vector<VariantReport>& reports, std::uint64_t seed) {
    std::ostringstream out;
    eval::write_report_lines(out, report_lines(reports, seed));
    return out.str();
}

inline std::vector<VariantReport> run_eval(Workspace& ws, const std::optional<model::Variant>& only = std::nullopt) {
    ws.require(Stage::embed, "embeddings");
    std::vector<VariantReport> reports;
    for (auto v : selected(ws.config(), only)) reports.push_back(evaluate_variant(ws, v));
    ws.put(Stage::eval, "report.txt", report_table(reports, ws.config()));
    ws.put(Stage::eval, "report.csv", report_csv(reports, ws.config().eval_seed));
    ws.commit(Stage::eval);
    ws.log() << "[eval] wrote report for " << reports.size() << " variant(s)\n";
    return reports;
}

/// Per-learner ranking of all configured variants by mean ACC.
inline std::string ranking_table(const std::vector<VariantReport>& reports, const ExperimentConfig& c) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    for (auto l : c.learners) {
        const auto name = eval::learner_name(l);
        std::vector<const VariantReport*> order;
        for (const auto& r : reports) order.push_back(&r);
        std::stable_sort(order.begin(), order.end(),
                         [&](auto* a, auto* b) { return a->learners.at(name).acc > b->learners.at(name).acc; });
        out << "learner " << name << "\nrank,variant,acc,f1\n";
        for (std::size_t i = 0; i < order.size(); ++i)
            out << i + 1 << ',' << order[i]->variant << ',' << order[i]->learners.at(name).acc << ',' << order[i]->learners.at(name).f1
                << '\n';
        out << '\n';
    }
    return out.str();
}

inline std::vector<VariantReport> run_compare(Workspace& ws) {
    const auto& c = ws.config();
    if (c.variants.size() < 2) throw ConfigError("compare needs at least 2 variants in model.variants");
    ws.require(Stage::embed, "embeddings");
    std::vector<VariantReport> reports;
    for (auto v : c.variants) reports.push_back(evaluate_variant(ws, v));
    fs::create_directories(c.workspace / "compare");
    write_file_atomic(c.workspace / "compare" / "ranking.txt", ranking_table(reports, c));
    write_file_atomic(c.workspace / "compare" / "report.txt", report_table(reports, c));
    ws.log() << "[compare] ranked " << reports.size() << " variants\n";
    return reports;
}

inline void run_all(Workspace& ws) {
    run_gen(ws);
    run_featurize(ws);
    run_pretrain(ws);
    run_train(ws);
    run_embed(ws);
    run_eval(ws);
}

/// Runs one named stage under the workspace lock.
inline void run_stage(const std::string& stage, const ExperimentConfig& cfg, std::ostream& log,
                      const std::optional<model::Variant>& only = std::nullopt) {
    static const std::set<std::string> known{"gen", "featurize", "pretrain", "train", "embed", "eval", "all", "compare"};
    if (!known.count(stage)) throw ConfigError("unknown stage '" + stage + "'");
    WorkspaceLock lock(cfg.workspace);
    Workspace ws(cfg, log);
    if (stage == "gen") run_gen(ws);
    if (stage == "featurize") run_featurize(ws);
    if (stage == "pretrain") run_pretrain(ws);
    if (stage == "train") run_train(ws, only);
    if (stage == "embed") run_embed(ws, only);
    if (stage == "eval") run_eval(ws, only);
    if (stage == "all") run_all(ws);
    if (stage == "compare") run_compare(ws);
}

/// Process exit status for an exception escaping a stage.
inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const MissingArtifactError*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

} // namespace doufu::pipeline
