#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ginv/image_io.hpp"
#include "ginv/inversion.hpp"

namespace ginv::cli {

namespace fs = std::filesystem;

/// Malformed run configuration: unknown key, bad value or inconsistent settings.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum ExitCode : int { kSuccess = 0, kUsageOrIo = 2, kNumerical = 3 };

/// Victim generation plus attack settings, as read from a flat key = value file.
struct RunConfig {
    std::string preset = "tinier";
    std::string source = "synthetic";  // synthetic | idx
    std::string idx_images, idx_labels;
    SyntheticSource synthetic;
    std::size_t batch_size = 1;
    bool distinct_labels = true;
    std::size_t pool_size = 128;
    std::size_t train_steps = 0;
    std::size_t train_size = 1000;
    std::size_t train_batch = 32;
    double train_lr = 0.05;
    bool bn_stats = true;
    LabelRule label_rule = LabelRule::Min;
    std::size_t grid_per_row = 0;
    std::uint64_t seed = 0;
    AttackConfig attack;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* first = text.data();
    const char* last = first + text.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || text.empty())
        throw ConfigError("bad value '" + text + "' for key '" + key + "'");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(v)) throw ConfigError("bad value '" + text + "' for key '" + key + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("bad value '" + text + "' for key '" + key + "' (expected true or false)");
}

struct Field {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T, class Access>
Field number(std::string key, Access acc) {
    return {key, [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_number<T>(key, v); },
            [acc](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>)
                    return format_double(acc(c));
                else
                    return std::to_string(acc(c));
            }};
}

template <class Access>
Field boolean(std::string key, Access acc) {
    return {key, [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_bool(key, v); },
            [acc](const RunConfig& c) { return std::string(acc(c) ? "true" : "false"); }};
}

template <class Access>
Field text(std::string key, Access acc) {
    return {key, [acc](RunConfig& c, const std::string& v) { acc(c) = v; }, [acc](const RunConfig& c) { return acc(c); }};
}

template <class E, class Access>
Field choice(std::string key, Access acc, std::initializer_list<std::pair<const char*, E>> choices) {
    std::vector<std::pair<const char*, E>> list(choices);
    return {key,
            [acc, key, list](RunConfig& c, const std::string& v) {
                for (const auto& [name, value] : list)
                    if (v == name) {
                        acc(c) = value;
                        return;
                    }
                std::string names;
                for (const auto& p : list) names += (names.empty() ? "" : "|") + std::string(p.first);
                throw ConfigError("bad value '" + v + "' for key '" + key + "' (expected " + names + ")");
            },
            [acc, list](const RunConfig& c) {
                for (const auto& [name, value] : list)
                    if (value == acc(c)) return std::string(name);
                return std::string("?");
            }};
}

#define GINV_ACCESS(member) [](auto& c) -> auto& { return c.member; }

inline const std::vector<Field>& fields() {
    static const std::vector<Field> all = [] {
        std::vector<Field> f;
        f.push_back(text("preset", GINV_ACCESS(preset)));
        f.push_back(text("source", GINV_ACCESS(source)));
        f.push_back(text("idx_images", GINV_ACCESS(idx_images)));
        f.push_back(text("idx_labels", GINV_ACCESS(idx_labels)));
        f.push_back(number<std::size_t>("channels", GINV_ACCESS(synthetic.channels)));
        f.push_back(number<std::size_t>("height", GINV_ACCESS(synthetic.height)));
        f.push_back(number<std::size_t>("width", GINV_ACCESS(synthetic.width)));
        f.push_back(number<std::size_t>("classes", GINV_ACCESS(synthetic.classes)));
        f.push_back(number<double>("noise", GINV_ACCESS(synthetic.noise)));
        f.push_back(number<std::size_t>("max_shift", GINV_ACCESS(synthetic.max_shift)));
        f.push_back(number<std::size_t>("batch_size", GINV_ACCESS(batch_size)));
        f.push_back(boolean("distinct_labels", GINV_ACCESS(distinct_labels)));
        f.push_back(number<std::size_t>("pool_size", GINV_ACCESS(pool_size)));
        f.push_back(number<std::size_t>("train_steps", GINV_ACCESS(train_steps)));
        f.push_back(number<std::size_t>("train_size", GINV_ACCESS(train_size)));
        f.push_back(number<std::size_t>("train_batch", GINV_ACCESS(train_batch)));
        f.push_back(number<double>("train_lr", GINV_ACCESS(train_lr)));
        f.push_back(boolean("bn_stats", GINV_ACCESS(bn_stats)));
        f.push_back(choice<LabelRule>("label_rule", GINV_ACCESS(label_rule), {{"min", LabelRule::Min}, {"sum", LabelRule::Sum}}));
        f.push_back(number<std::size_t>("grid_per_row", GINV_ACCESS(grid_per_row)));
        f.push_back(number<std::uint64_t>("seed", GINV_ACCESS(seed)));
        f.push_back(number<double>("alpha_grad", GINV_ACCESS(attack.alpha_grad)));
        f.push_back(number<double>("alpha_tv", GINV_ACCESS(attack.alpha_tv)));
        f.push_back(number<double>("alpha_l2", GINV_ACCESS(attack.alpha_l2)));
        f.push_back(number<double>("alpha_bn", GINV_ACCESS(attack.alpha_bn)));
        f.push_back(number<double>("alpha_group", GINV_ACCESS(attack.alpha_group)));
        f.push_back(number<double>("alpha_noise", GINV_ACCESS(attack.alpha_noise)));
        f.push_back(number<double>("lr", GINV_ACCESS(attack.lr)));
        f.push_back(number<std::size_t>("iterations", GINV_ACCESS(attack.iterations)));
        f.push_back(number<std::size_t>("warmup", GINV_ACCESS(attack.warmup)));
        f.push_back(number<std::size_t>("group_size", GINV_ACCESS(attack.group_size)));
        f.push_back({"consensus_start",
                     [](RunConfig& c, const std::string& v) {
                         if (v == "auto")
                             c.attack.consensus_start.reset();
                         else
                             c.attack.consensus_start = parse_number<std::size_t>("consensus_start", v);
                     },
                     [](const RunConfig& c) {
                         return c.attack.consensus_start ? std::to_string(*c.attack.consensus_start) : std::string("auto");
                     }});
        f.push_back(number<std::size_t>("consensus_interval", GINV_ACCESS(attack.consensus_interval)));
        f.push_back(choice<ConsensusMode>("consensus", GINV_ACCESS(attack.consensus),
                                          {{"registered", ConsensusMode::Registered}, {"lazy", ConsensusMode::Lazy}}));
        f.push_back(choice<BnRegime>("bn_regime", GINV_ACCESS(attack.bn_regime),
                                     {{"exact", BnRegime::Exact}, {"approx", BnRegime::Approx}}));
        f.push_back(choice<GradLoss>("grad_loss", GINV_ACCESS(attack.grad_loss), {{"l2", GradLoss::L2}, {"cosine", GradLoss::Cosine}}));
        f.push_back(boolean("squared_norm", GINV_ACCESS(attack.squared_norm)));
        f.push_back(number<int>("registration_radius", GINV_ACCESS(attack.registration_radius)));
        return f;
    }();
    return all;
}

#undef GINV_ACCESS

}  // namespace detail

/// Sets one key. Throws ConfigError for unknown keys and unparsable values.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::fields())
        if (f.key == key) {
            f.set(cfg, value);
            cfg.attack.seed = cfg.seed;
            return;
        }
    throw ConfigError("unknown key '" + key + "'");
}

/// Parses "key=value" as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    apply_setting(cfg, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

/// Applies a config file body on top of `cfg`. `origin` prefixes error messages.
inline void parse_config_text(RunConfig& cfg, const std::string& body, const std::string& origin = "config") {
    std::istringstream in(body);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const auto hash = line.find('#');
        const std::string content = detail::trim(std::string_view(line).substr(0, hash));
        if (content.empty()) continue;
        const auto eq = content.find('=');
        try {
            if (eq == std::string::npos) throw ConfigError("expected key = value");
            apply_setting(cfg, detail::trim(content.substr(0, eq)), detail::trim(content.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
        }
    }
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    parse_config_text(base, ss.str(), path);
    return base;
}

/// Every key with its current value, loadable by parse_config_text.
inline std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
    return out;
}

inline void validate(const RunConfig& cfg) {
    cfg.attack.validate();
    if (cfg.source != "synthetic" && cfg.source != "idx") throw ConfigError("source must be synthetic or idx, got '" + cfg.source + "'");
    if (cfg.source == "idx" && (cfg.idx_images.empty() || cfg.idx_labels.empty()))
        throw ConfigError("source = idx needs idx_images and idx_labels");
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (cfg.pool_size < cfg.batch_size) throw ConfigError("pool_size must be at least batch_size");
    if (cfg.train_steps > 0 && cfg.train_batch == 0) throw ConfigError("train_batch must be at least 1");
    try {
        (void)preset(cfg.preset, cfg.synthetic.channels, cfg.synthetic.height, cfg.synthetic.width, cfg.synthetic.classes);
    } catch (const SpecError& e) {
        throw ConfigError(e.what());
    }
}

// ---------------------------------------------------------------------------
// Victim side

struct Victim {
    Model model;
    Batch batch;
    Tensor gallery;  // the pool the batch was drawn from
};

/// Builds the victim model and client batch from a config. All randomness
/// derives from cfg.seed.
inline Victim build_victim(const RunConfig& cfg) {
    validate(cfg);
    Dataset pool, train;
    SyntheticSource src = cfg.synthetic;
    if (cfg.source == "synthetic") {
        pool = synthetic_dataset(src, cfg.pool_size, cfg.seed);
        if (cfg.train_steps) train = synthetic_dataset(src, cfg.train_size, derive_seed(cfg.seed, stream::training));
    } else {
        Dataset all = load_idx(cfg.idx_images, cfg.idx_labels);
        if (all.images.size(1) != src.channels || all.images.size(2) != src.height || all.images.size(3) != src.width)
            throw ConfigError("IDX images are " + shape_str(all.images.shape()) + " but the config says " +
                              std::to_string(src.channels) + "x" + std::to_string(src.height) + "x" + std::to_string(src.width));
        for (auto y : all.labels)
            if (y >= src.classes) throw ConfigError("IDX label " + std::to_string(y) + " exceeds classes = " + std::to_string(src.classes));
        std::vector<std::size_t> ids(std::min(cfg.pool_size, all.size()));
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        Batch head = all.subset(ids);
        pool = Dataset{head.images, head.labels, src.classes};
        train = all;
        train.classes = src.classes;
    }
    Model model = model_init(preset(cfg.preset, src.channels, src.height, src.width, src.classes), cfg.seed);
    if (cfg.train_steps)
        sgd_train(model, train.images, train.labels, TrainOptions{cfg.train_steps, cfg.train_batch, cfg.train_lr, 0.9, 0.1, cfg.seed});
    Batch batch = make_batch(pool, cfg.batch_size, cfg.distinct_labels, cfg.seed);
    return {std::move(model), std::move(batch), pool.images};
}

/// Sibling ground-truth path of a bundle: same stem, ".gt" extension.
inline std::string ground_truth_path(const std::string& bundle_path) {
    return fs::path(bundle_path).replace_extension(".gt").string();
}

struct GenVictimOutput {
    std::string bundle_path, ground_truth_path;
};

inline GenVictimOutput cmd_gen_victim(const RunConfig& cfg, const std::string& out_path) {
    Victim v = build_victim(cfg);
    auto bundle = compute_bundle(v.model, v.batch, cfg.bn_stats);
    if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
    save_bundle(bundle, out_path);
    const std::string gt = ground_truth_path(out_path);
    save_ground_truth(v.batch, gt, &v.gallery);
    return {out_path, gt};
}

/// Restored labels of a bundle; k = 0 uses the bundle's batch size.
inline std::vector<std::size_t> cmd_labels(const std::string& bundle_path, std::size_t k, LabelRule rule) {
    auto bundle = load_bundle(bundle_path);
    if (k == 0) k = bundle.batch_size;
    return restore_labels(bundle.fc_gradient(), k, rule);
}

// ---------------------------------------------------------------------------
// Report directory

inline constexpr const char* kResultFile = "result.gres";
inline constexpr const char* kBundleCopy = "bundle.ginv";
inline constexpr const char* kConfigEcho = "config.txt";
inline constexpr const char* kMetricsFile = "metrics.txt";
inline constexpr const char* kCsvHeader = "t,lr,L_grad,TV,l2,BN,group,total";

inline std::string image_extension(const Tensor& batch) { return batch.size(1) == 1 ? ".pgm" : ".ppm"; }

inline std::string loss_csv(const std::vector<LossRecord>& trace) {
    using detail::format_double;
    std::string out = std::string(kCsvHeader) + "\n";
    for (const auto& r : trace) {
        const auto& t = r.terms;
        out += std::to_string(r.t) + "," + format_double(r.lr) + "," + format_double(t.grad) + "," + format_double(t.tv) + "," +
               format_double(t.l2) + "," + format_double(t.bn) + "," + format_double(t.group) + "," + format_double(t.total) + "\n";
    }
    return out;
}

inline void write_text(const fs::path& path, const std::string& body) {
    write_file(path.string(), std::span(reinterpret_cast<const std::uint8_t*>(body.data()), body.size()));
}

inline void save_result(const AttackResult& r, const std::string& path) {
    Archive a;
    a.magic = "GRES";
    a.batch_size = static_cast<std::uint32_t>(r.labels.size());
    a.tensors.push_back({"consensus", r.consensus});
    a.tensors.push_back({"labels", Tensor({r.labels.size()}, std::vector<double>(r.labels.begin(), r.labels.end()))});
    for (std::size_t g = 0; g < r.candidates.size(); ++g) a.tensors.push_back({"candidate/" + std::to_string(g), r.candidates[g]});
    save_archive(a, path);
}

/// Consensus, labels and per-seed candidates of a saved result.
inline AttackResult load_result(const std::string& path) {
    auto a = load_archive(path, "GRES");
    AttackResult r;
    r.consensus = a.get("consensus");
    for (double y : a.get("labels").data()) r.labels.push_back(static_cast<std::size_t>(y));
    for (std::size_t g = 0; const Tensor* t = a.find("candidate/" + std::to_string(g)); ++g) r.candidates.push_back(*t);
    if (r.consensus.dim() != 4 || r.consensus.size(0) != r.labels.size())
        throw FormatError(path + ": consensus and label counts differ");
    return r;
}

/// Writes every artefact of one attack into `dir` from the calling thread.
inline void write_report(const fs::path& dir, const AttackResult& r, const GradientBundle& bundle, const RunConfig& cfg) {
    fs::create_directories(dir);
    const std::string ext = image_extension(r.consensus);
    for (std::size_t g = 0; g < r.candidates.size(); ++g) {
        write_image_grid(r.candidates[g], (dir / ("seed_" + std::to_string(g) + ext)).string(), cfg.grid_per_row);
        write_text(dir / ("loss_seed" + std::to_string(g) + ".csv"), loss_csv(r.traces.at(g)));
    }
    write_image_grid(r.consensus, (dir / ("consensus" + ext)).string(), cfg.grid_per_row);
    save_result(r, (dir / kResultFile).string());
    save_bundle(bundle, (dir / kBundleCopy).string());
    write_text(dir / kConfigEcho, config_to_text(cfg));
    const auto d = gradient_diagnostics(r.consensus, r.labels, bundle);
    std::ostringstream m;
    m << std::setprecision(10) << "# attack\n"
      << "attack_seconds = " << r.seconds << "\n"
      << "sign_match_pct = " << d.sign_match << "\n"
      << "grad_l2 = " << d.l2 << "\n"
      << "grad_cos = " << d.cosine << "\n";
    write_text(dir / kMetricsFile, m.str());
}

inline AttackResult cmd_attack(const std::string& bundle_path, const RunConfig& cfg, const std::string& out_dir) {
    validate(cfg);
    auto bundle = load_bundle(bundle_path);
    auto labels = restore_labels(bundle.fc_gradient(), bundle.batch_size, cfg.label_rule);
    auto result = run_inversion(cfg.attack, bundle, labels);
    write_report(out_dir, result, bundle, cfg);
    return result;
}

/// Scores a report directory against ground truth and appends the metrics to
/// its metrics file.
inline MetricsReport cmd_eval(const std::string& report_dir, const std::string& ground_truth) {
    const fs::path dir(report_dir);
    if (!fs::is_directory(dir)) throw IoError("report directory " + report_dir + " does not exist");
    Batch truth = load_ground_truth(ground_truth);
    auto gallery = load_gallery(ground_truth);
    AttackResult r = load_result((dir / kResultFile).string());
    auto bundle = load_bundle((dir / kBundleCopy).string());
    RunConfig cfg;
    if (fs::exists(dir / kConfigEcho)) cfg = load_config((dir / kConfigEcho).string());
    if (r.consensus.shape() != truth.images.shape())
        throw ShapeError("eval: reconstruction " + shape_str(r.consensus.shape()) + " vs ground truth " + shape_str(truth.images.shape()));
    const int radius = cfg.attack.registration_radius ? cfg.attack.registration_radius : default_radius(truth.images.size(2));
    Tensor aligned = align_ground_truth(r.labels, truth);
    MetricsReport report = image_metrics(r.consensus, aligned, radius);
    report.gradient = gradient_diagnostics(r.consensus, r.labels, bundle);
    if (gallery && gallery->size(0) >= truth.size()) report.iip = iip_score(r.consensus, aligned, *gallery, bundle.model);
    std::ofstream out(dir / kMetricsFile, std::ios::app);
    if (!out) throw IoError("cannot append to " + (dir / kMetricsFile).string());
    out << "# eval\n" << report.to_text();
    return report;
}

// ---------------------------------------------------------------------------
// Command line

/// Runs the tool on `args` (without the program name) and returns the exit code.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Gradient inversion toolkit: victims, label restoration, attacks and evaluation", "ginv"};
    app.require_subcommand(1);

    std::string config_path, out_path, bundle_path, report_dir, truth_path, rule = "min";
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::size_t k = 0;
    auto add_config_options = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "key = value run configuration file");
        sub->add_option("--set", overrides, "override one key, as key=value (repeatable)");
        sub->add_option("--seed", seed, "rng seed (overrides the config)");
    };

    auto* gen = app.add_subcommand("gen-victim", "build a victim and write its gradient bundle and ground truth");
    add_config_options(gen);
    gen->add_option("--out", out_path, "bundle path; ground truth goes next to it with a .gt extension")->required();

    auto* lab = app.add_subcommand("labels", "restore the batch labels from a bundle");
    lab->add_option("bundle", bundle_path, "gradient bundle")->required();
    lab->add_option("-k,--k", k, "number of labels (default: the bundle's batch size)");
    lab->add_option("--rule", rule, "min or sum")->check(CLI::IsMember({"min", "sum"}));
    lab->add_option("--truth", truth_path, "ground-truth file; also prints the label-set accuracy");

    auto* atk = app.add_subcommand("attack", "reconstruct the batch behind a bundle");
    atk->add_option("bundle", bundle_path, "gradient bundle")->required();
    add_config_options(atk);
    atk->add_option("--out", out_path, "report directory")->required();

    auto* ev = app.add_subcommand("eval", "score a report directory against ground truth");
    ev->add_option("report", report_dir, "report directory written by attack")->required();
    ev->add_option("ground_truth", truth_path, "ground-truth file written by gen-victim")->required();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kSuccess : kUsageOrIo;
    }

    auto resolve_config = [&] {
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        for (const auto& o : overrides) apply_override(cfg, o);
        if (seed) apply_setting(cfg, "seed", std::to_string(*seed));
        validate(cfg);
        return cfg;
    };

    try {
        if (gen->parsed()) {
            auto paths = cmd_gen_victim(resolve_config(), out_path);
            out << "bundle: " << paths.bundle_path << "\nground truth: " << paths.ground_truth_path << "\n";
        } else if (lab->parsed()) {
            auto labels = cmd_labels(bundle_path, k, rule == "sum" ? LabelRule::Sum : LabelRule::Min);
            for (std::size_t i = 0; i < labels.size(); ++i) out << (i ? " " : "") << labels[i];
            out << "\n";
            if (!truth_path.empty()) out << "accuracy: " << label_set_accuracy(labels, load_ground_truth(truth_path).labels) << "\n";
        } else if (atk->parsed()) {
            auto r = cmd_attack(bundle_path, resolve_config(), out_path);
            out << "labels:";
            for (auto y : r.labels) out << " " << y;
            out << "\nfinal total loss: " << r.traces.front().back().terms.total << "\nreport: " << out_path << "\n";
        } else if (ev->parsed()) {
            out << cmd_eval(report_dir, truth_path).to_text();
        }
    } catch (const NumericalError& e) {
        err << "error: numerical failure in term " << e.term() << ": " << e.what() << "\n";
        return kNumerical;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kUsageOrIo;
    }
    return kSuccess;
}

}  // namespace ginv::cli
