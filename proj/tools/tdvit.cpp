// tdvit: synthetic data generation, MAE pretraining, fine-tuning, evaluation,
// gradient checks and multi-run reports.

#include <tdvit/tdvit.hpp>

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace tdvit;

/// Options of one subcommand, remembered so config files can fill them and the
/// effective values can be echoed.
class Options {
   public:
    explicit Options(CLI::App* app) : app_(app) {}

    template <typename V>
    CLI::Option* add(const std::string& key, V& var, const std::string& help) {
        keys_.push_back({key, [&var] { return show(var); }});
        return app_->add_option("--" + key, var, help);
    }
    CLI::Option* flag(const std::string& key, bool& var, const std::string& help) {
        keys_.push_back({key, [&var] { return std::string(var ? "true" : "false"); }});
        return app_->add_flag("--" + key, var, help);
    }

    /// Fills options absent from the command line from a key=value file.
    void apply_file(const std::string& path) const {
        for (const auto& e : read_config_file(path)) {
            CLI::Option* opt = e.key == "config" ? nullptr : app_->get_option_no_throw("--" + e.key);
            if (!opt) {
                throw CLI::ValidationError(path + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
            }
            if (opt->count() > 0) continue;
            opt->add_result(e.value);
            opt->run_callback();
        }
    }

    /// Marks options that must come from the command line or the config file.
    void require(std::initializer_list<std::string> keys) { required_.insert(required_.end(), keys); }

    void check_required() const {
        for (const auto& key : required_) {
            if (app_->get_option("--" + key)->count() == 0) {
                throw CLI::RequiredError("--" + key + " is required (flag or config key)");
            }
        }
    }

    void print_effective(std::ostream& os) const {
        os << "# effective configuration (" << app_->get_name() << ")\n";
        for (const auto& [key, value] : keys_) os << key << " = " << value() << "\n";
    }

   private:
    template <typename V>
    static std::string show(const V& v) {
        std::ostringstream os;
        if constexpr (std::is_floating_point_v<V>) os << std::setprecision(10);
        os << v;
        return os.str();
    }

    CLI::App* app_;
    std::vector<std::pair<std::string, std::function<std::string()>>> keys_;
    std::vector<std::string> required_;
};

std::uint64_t default_seed() {
    if (const char* env = std::getenv("TDVIT_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            std::cerr << "warning: ignoring non-numeric TDVIT_SEED '" << env << "'\n";
        }
    }
    return 0;
}

const CLI::Validator kPositive(
    [](std::string& s) -> std::string {
        try {
            if (std::stod(s) > 0.0) return {};
        } catch (const std::exception&) {
        }
        return "must be a positive number, got '" + s + "'";
    },
    "POSITIVE");

const CLI::Validator kOpenUnit(
    [](std::string& s) -> std::string {
        try {
            const double v = std::stod(s);
            if (v > 0.0 && v < 1.0) return {};
        } catch (const std::exception&) {
        }
        return "must lie strictly between 0 and 1, got '" + s + "'";
    },
    "(0,1)");

struct CommonArgs {
    std::string config;
    std::uint64_t seed = default_seed();
    std::size_t workers = 1;
    bool verbose = false;
};

void add_common(Options& o, CommonArgs& c) {
    o.add("seed", c.seed, "random seed (default: $TDVIT_SEED or 0)");
    o.add("workers", c.workers, "data-parallel workers; 1 is bit-reproducible")->check(CLI::PositiveNumber);
    o.flag("verbose", c.verbose, "progress on standard error");
}

struct ModelArgs {
    std::string mode = "ta";
    std::size_t dim = 64, heads = 8, depth = 8, mlp_hidden = 256, patch = 8, decoder_depth = 2;
    bool pairwise = false, share_tem = false;
    double tem_slope = 1.0, tem_offset = 6.0;

    ModelConfig build(const Dataset& data) const {
        ModelConfig c;
        c.image_height = data.height;
        c.image_width = data.width;
        c.channels = data.channels;
        c.patch_size = patch;
        c.dim = dim;
        c.heads = heads;
        if (heads == 0 || dim % heads != 0) throw std::invalid_argument("heads must divide dim");
        c.head_dim = dim / heads;
        c.depth = depth;
        c.mlp_hidden = mlp_hidden;
        c.decoder_depth = decoder_depth;
        c.mode = parse_mode(mode);
        c.pairwise_rel_time = pairwise;
        c.share_tem_across_layers = share_tem;
        c.tem_init_slope = tem_slope;
        c.tem_init_offset = tem_offset;
        c.validate();
        return c;
    }
};

CLI::Option* add_model(Options& o, ModelArgs& m) {
    auto* mode = o.add("mode", m.mode, "temporal mechanism")->check(CLI::IsMember({"positional", "te", "ta"}));
    o.add("dim", m.dim, "embedding dimension");
    o.add("heads", m.heads, "attention heads");
    o.add("depth", m.depth, "encoder blocks");
    o.add("mlp-hidden", m.mlp_hidden, "MLP hidden width");
    o.add("patch", m.patch, "patch size in pixels");
    o.add("decoder-depth", m.decoder_depth, "MAE decoder blocks");
    o.flag("pairwise", m.pairwise, "pairwise |t_i - t_j| time distances instead of distance to the latest scan");
    o.flag("share-tem", m.share_tem, "share TEM parameters across layers");
    o.add("tem-slope", m.tem_slope, "initial TEM slope a")->check(kPositive);
    o.add("tem-offset", m.tem_offset, "initial TEM offset c")->check(kPositive);
    return mode;
}

struct TrainArgs {
    std::size_t epochs = 20, batch = 32;
    double lr = 3e-4, lr_min = 0.0, warmup = 0.05, weight_decay = 0.05, clip = 1.0, mask_ratio = 0.75;
    bool no_augment = false;
    std::string log;

    TrainConfig build(const CommonArgs& c) const {
        TrainConfig t;
        t.epochs = epochs;
        t.batch_size = batch;
        t.lr_base = lr;
        t.lr_min = lr_min;
        t.warmup_fraction = warmup;
        t.weight_decay = weight_decay;
        t.clip_norm = clip;
        t.mask_ratio = mask_ratio;
        t.augment = !no_augment;
        t.seed = c.seed;
        t.workers = c.workers;
        t.verbose = c.verbose;
        return t;
    }
};

void add_training(Options& o, TrainArgs& t) {
    o.add("epochs", t.epochs, "training epochs")->check(CLI::PositiveNumber);
    o.add("batch", t.batch, "batch size")->check(CLI::PositiveNumber);
    o.add("lr", t.lr, "peak learning rate")->check(kPositive);
    o.add("lr-min", t.lr_min, "final learning rate")->check(CLI::NonNegativeNumber);
    o.add("warmup", t.warmup, "warmup fraction of total steps")->check(CLI::Range(0.0, 0.99));
    o.add("weight-decay", t.weight_decay, "decoupled weight decay")->check(CLI::NonNegativeNumber);
    o.add("clip", t.clip, "global gradient-norm clip (0 disables)")->check(CLI::NonNegativeNumber);
    o.flag("no-augment", t.no_augment, "disable crop/flip/intensity augmentation");
    o.add("log", t.log, "metric CSV output path");
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    CommonArgs common;
    std::string variant = "v2", out, backgrounds;
    std::size_t n = 1000;
    GeneratorSpec spec;
};

int run_generate(GenerateArgs& a) {
    GeneratorSpec spec = a.spec;
    spec.variant = parse_variant(a.variant);
    spec.seed = a.common.seed;
    if (!a.backgrounds.empty()) spec.backgrounds = load_external_backgrounds(a.backgrounds);
    const auto cohort = generate_dataset(spec, a.n, a.common.workers);
    write_dataset(a.out, cohort.dataset);

    std::size_t counts[2] = {0, 0};
    double gap_sum[2] = {0, 0};
    for (const auto& s : cohort.dataset.samples) {
        const int y = static_cast<int>(*s.label);
        ++counts[y];
        if (s.times.size() > 1) gap_sum[y] += (s.times.back() - s.times.front()) / static_cast<double>(s.times.size() - 1);
    }
    std::cout << std::fixed << std::setprecision(3);
    std::cout << "wrote " << a.out << "\n"
              << "samples " << a.n << "\n"
              << "benign " << counts[0] << "\n"
              << "malignant " << counts[1] << "\n"
              << "frames " << spec.frames << "\n"
              << "variant " << to_string(spec.variant) << "\n";
    for (int y = 0; y < 2; ++y) {
        std::cout << "mean_gap_" << (y ? "malignant" : "benign") << "_months "
                  << (counts[y] ? gap_sum[y] / static_cast<double>(counts[y]) : std::nan("")) << "\n";
    }
    return 0;
}

struct PretrainArgs {
    CommonArgs common;
    ModelArgs model;
    TrainArgs train;
    std::string data, out;
};

int run_pretrain(PretrainArgs& a) {
    const Dataset data = read_dataset(a.data);
    ModelParams<float> params = init_weights<float>(a.model.build(data), a.common.seed, false, true);
    MetricLog log;
    const auto curve = pretrain_mae(data, params, a.train.build(a.common), &log);
    write_checkpoint(a.out, params, a.common.seed);
    if (!a.train.log.empty()) log.write_csv(a.train.log);
    std::cout << "wrote " << a.out << "\nfinal_mae_loss " << std::setprecision(6) << curve.back() << "\n";
    return 0;
}

struct TrainCmdArgs {
    CommonArgs common;
    ModelArgs model;
    TrainArgs train;
    std::string data, val, init, out;
    CLI::Option* mode_opt = nullptr;
};

int run_train(TrainCmdArgs& a) {
    const Dataset data = read_dataset(a.data);
    ModelConfig config = a.model.build(data);
    std::optional<Checkpoint<float>> mae;
    if (!a.init.empty()) {
        mae = read_checkpoint<float>(a.init);
        if (a.mode_opt->count() > 0 && mae->params.config.mode != config.mode) {
            throw std::invalid_argument("--mode " + a.model.mode + " conflicts with checkpoint mode " +
                                        std::string(to_string(mae->params.config.mode)));
        }
        config = mae->params.config;
        if (config.image_height != data.height || config.image_width != data.width || config.channels != data.channels) {
            throw std::invalid_argument("checkpoint '" + a.init + "' expects different frame geometry than '" + a.data + "'");
        }
    }
    ModelParams<float> params = init_weights<float>(config, a.common.seed, true, false);
    if (mae) adopt_encoder(params, mae->params);

    std::optional<Dataset> val;
    if (!a.val.empty()) val = read_dataset(a.val);
    MetricLog log;
    const auto history = train_classifier(data, params, a.train.build(a.common), val ? &*val : nullptr, &log);
    write_checkpoint(a.out, params, a.common.seed);
    if (!a.train.log.empty()) log.write_csv(a.train.log);
    std::cout << "wrote " << a.out << "\nfinal_train_loss " << std::setprecision(6) << history.step_losses.back() << "\n";
    if (!history.val_auc.empty()) std::cout << "final_val_auc " << std::setprecision(4) << std::fixed << history.val_auc.back() << "\n";
    return 0;
}

struct EvaluateArgs {
    CommonArgs common;
    std::string checkpoint, data, scores, roc, summary;
};

int run_evaluate(EvaluateArgs& a) {
    const auto ck = read_checkpoint<float>(a.checkpoint);
    if (!ck.params.has_classifier) throw std::invalid_argument("checkpoint missing classifier head");
    const Dataset data = read_dataset(a.data);
    const EvalReport r = evaluate(ck.params, data);
    if (!a.scores.empty()) write_scores_csv(a.scores, r.scored);
    if (!a.roc.empty() && !r.roc.empty()) write_roc_csv(a.roc, r.roc);
    if (std::isnan(r.auc)) std::cerr << "warning: AUC undefined (single-class labels)\n";
    if (!a.summary.empty()) {
        std::ofstream out(a.summary, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + a.summary + "' for writing");
        out << "mode,seed,auc,accuracy,n\n"
            << to_string(ck.params.config.mode) << ',' << ck.seed << ',' << format_real(r.auc) << ','
            << format_real(r.accuracy) << ',' << data.size() << '\n';
    }
    std::cout << std::fixed << std::setprecision(4) << "AUC " << r.auc << "\naccuracy " << r.accuracy << "\n";
    return 0;
}

struct ReportArgs {
    std::vector<std::string> inputs;
    std::string csv;
};

int run_report(ReportArgs& a) {
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<std::string, double>>> runs;
    for (const auto& path : a.inputs) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open summary '" + path + "'");
        std::string line;
        if (!std::getline(in, line) || line.rfind("mode,seed,auc", 0) != 0) {
            throw std::runtime_error("'" + path + "' is not an evaluate summary (expected header 'mode,seed,auc,...')");
        }
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::stringstream ss(line);
            for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
            if (f.size() < 3) throw std::runtime_error("'" + path + "': malformed row '" + line + "'");
            if (!runs.count(f[0])) order.push_back(f[0]);
            runs[f[0]].push_back({f[1], std::stod(f[2])});
        }
    }
    struct Row {
        std::string mode;
        std::size_t n;
        double mean, sd;
        std::string per_seed;
    };
    std::vector<Row> rows;
    for (const auto& mode : order) {
        const auto& v = runs[mode];
        double mean = 0, sd = 0;
        for (const auto& r : v) mean += r.second;
        mean /= static_cast<double>(v.size());
        for (const auto& r : v) sd += (r.second - mean) * (r.second - mean);
        sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
        std::ostringstream seeds;
        seeds << std::fixed << std::setprecision(4);
        for (std::size_t i = 0; i < v.size(); ++i) seeds << (i ? " " : "") << v[i].first << ":" << v[i].second;
        rows.push_back({mode, v.size(), mean, sd, seeds.str()});
    }
    std::cout << std::left << std::setw(12) << "mode" << std::setw(6) << "runs" << std::setw(10) << "mean_auc"
              << std::setw(10) << "std_auc" << "per_seed\n"
              << std::fixed << std::setprecision(4);
    for (const auto& r : rows) {
        std::cout << std::setw(12) << r.mode << std::setw(6) << r.n << std::setw(10) << r.mean << std::setw(10) << r.sd
                  << r.per_seed << "\n";
    }
    if (!a.csv.empty()) {
        std::ofstream out(a.csv, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open '" + a.csv + "' for writing");
        out << "mode,runs,mean_auc,std_auc\n";
        for (const auto& r : rows) out << r.mode << ',' << r.n << ',' << format_real(r.mean) << ',' << format_real(r.sd) << '\n';
    }
    return 0;
}

struct GradcheckArgs {
    CommonArgs common;
    std::string mode = "ta";
    double eps = 1e-5, tolerance = 1e-4;
    bool inject_fault = false;
};

int run_gradcheck(GradcheckArgs& a) {
    const auto groups = gradcheck_model(parse_mode(a.mode), a.common.seed, a.eps, a.inject_fault);
    bool ok = true;
    std::cout << std::scientific << std::setprecision(3);
    for (const auto& g : groups) {
        const bool pass = g.max_relative_error < a.tolerance;
        ok = ok && pass;
        std::cout << std::left << std::setw(24) << g.name << g.max_relative_error << (pass ? "  ok" : "  FAIL") << "\n";
    }
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (mode " << a.mode << ", tolerance " << a.tolerance
              << ")\n";
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-distance vision transformers on longitudinal image sequences"};
    app.require_subcommand(1, 1);

    // generate-data
    GenerateArgs gen;
    auto* gen_cmd = app.add_subcommand("generate-data", "write a synthetic TDDS dataset");
    Options gen_opts(gen_cmd);
    add_common(gen_opts, gen.common);
    gen_opts.add("variant", gen.variant, "v1 (regular sampling) or v2 (irregular)")->check(CLI::IsMember({"v1", "v2"}));
    gen_opts.add("n", gen.n, "number of samples")->check(CLI::PositiveNumber);
    gen_opts.add("out", gen.out, "output dataset path");
    gen_opts.add("backgrounds", gen.backgrounds, "CIFAR-10 binary file of background images");
    gen_opts.add("image-size", gen.spec.image_size, "frame side in pixels");
    gen_opts.add("channels", gen.spec.channels, "channels per frame");
    gen_opts.add("frames", gen.spec.frames, "scans per sequence")->check(CLI::PositiveNumber);
    gen_opts.add("growth-mean", gen.spec.benign_growth_mean, "benign growth mean, px/month")->check(kPositive);
    gen_opts.add("growth-std", gen.spec.benign_growth_std, "benign growth std")->check(CLI::NonNegativeNumber);
    gen_opts.add("d0-mean", gen.spec.initial_diameter_mean, "initial diameter mean, px")->check(kPositive);
    gen_opts.add("d0-std", gen.spec.initial_diameter_std, "initial diameter std")->check(CLI::NonNegativeNumber);
    gen_opts.add("intensity", gen.spec.nodule_intensity, "nodule peak intensity")->check(CLI::NonNegativeNumber);
    gen_opts.add("softness", gen.spec.edge_softness, "radial profile exponent")->check(kPositive);
    gen_opts.add("interval", gen.spec.scan_interval, "v1 scan interval, months")->check(kPositive);
    gen_opts.add("increment-min", gen.spec.increment_min, "v2 minimum diameter step, px")->check(kPositive);
    gen_opts.add("increment-max", gen.spec.increment_max, "v2 maximum diameter step, px")->check(kPositive);
    gen_opts.add("jitter", gen.spec.center_jitter, "per-frame center jitter, px")->check(CLI::NonNegativeNumber);
    gen_opts.require({"out"});
    gen_cmd->add_option("--config", gen.common.config, "key=value configuration file");

    // pretrain
    PretrainArgs pre;
    pre.train.lr = 1e-3;
    pre.train.epochs = 30;
    auto* pre_cmd = app.add_subcommand("pretrain", "masked-autoencoder pretraining");
    Options pre_opts(pre_cmd);
    add_common(pre_opts, pre.common);
    add_model(pre_opts, pre.model);
    add_training(pre_opts, pre.train);
    pre_opts.add("mask-ratio", pre.train.mask_ratio, "fraction of patch tokens hidden")->check(kOpenUnit);
    pre_opts.add("data", pre.data, "training dataset")->check(CLI::ExistingFile);
    pre_opts.add("out", pre.out, "checkpoint output path");
    pre_opts.require({"data", "out"});
    pre_cmd->add_option("--config", pre.common.config, "key=value configuration file");

    // train
    TrainCmdArgs tr;
    auto* tr_cmd = app.add_subcommand("train", "fine-tune a classifier");
    Options tr_opts(tr_cmd);
    add_common(tr_opts, tr.common);
    tr.mode_opt = add_model(tr_opts, tr.model);
    add_training(tr_opts, tr.train);
    tr_opts.add("data", tr.data, "training dataset")->check(CLI::ExistingFile);
    tr_opts.add("val", tr.val, "held-out dataset for per-epoch AUC")->check(CLI::ExistingFile);
    tr_opts.add("init", tr.init, "MAE checkpoint providing encoder weights")->check(CLI::ExistingFile);
    tr_opts.add("out", tr.out, "checkpoint output path");
    tr_opts.require({"data", "out"});
    tr_cmd->add_option("--config", tr.common.config, "key=value configuration file");

    // evaluate
    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "score a labeled dataset");
    Options ev_opts(ev_cmd);
    add_common(ev_opts, ev.common);
    ev_opts.add("checkpoint", ev.checkpoint, "classifier checkpoint")->check(CLI::ExistingFile);
    ev_opts.add("data", ev.data, "labeled dataset")->check(CLI::ExistingFile);
    ev_opts.add("scores", ev.scores, "per-sample scores CSV output");
    ev_opts.add("roc", ev.roc, "ROC points CSV output");
    ev_opts.add("summary", ev.summary, "one-row summary CSV consumed by report");
    ev_opts.require({"checkpoint", "data"});
    ev_cmd->add_option("--config", ev.common.config, "key=value configuration file");

    // gradcheck
    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "verify gradients on a tiny double-precision model");
    Options gc_opts(gc_cmd);
    add_common(gc_opts, gc.common);
    gc_opts.add("mode", gc.mode, "temporal mechanism")->check(CLI::IsMember({"positional", "te", "ta"}));
    gc_opts.add("eps", gc.eps, "central-difference step")->check(kPositive);
    gc_opts.add("tolerance", gc.tolerance, "maximum relative error")->check(kPositive);
    gc_cmd->add_flag("--inject-tem-fault", gc.inject_fault, "flip the sign of the TEM backward pass")->group("");
    gc_cmd->add_option("--config", gc.common.config, "key=value configuration file");

    // report
    ReportArgs rep;
    auto* rep_cmd = app.add_subcommand("report", "aggregate evaluate summaries into a per-mode table");
    rep_cmd->add_option("summaries", rep.inputs, "summary CSV files from evaluate")->check(CLI::ExistingFile);
    rep_cmd->add_option("--csv", rep.csv, "machine-readable table output");

    const std::vector<std::pair<CLI::App*, std::pair<Options*, std::string*>>> subs = {
        {gen_cmd, {&gen_opts, &gen.common.config}}, {pre_cmd, {&pre_opts, &pre.common.config}},
        {tr_cmd, {&tr_opts, &tr.common.config}},    {ev_cmd, {&ev_opts, &ev.common.config}},
        {gc_cmd, {&gc_opts, &gc.common.config}}};

    try {
        app.parse(argc, argv);
        for (const auto& [cmd, o] : subs) {
            if (!cmd->parsed()) continue;
            if (!o.second->empty()) o.first->apply_file(*o.second);
            o.first->check_required();
            o.first->print_effective(std::cerr);
        }
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen_cmd->parsed()) return run_generate(gen);
        if (pre_cmd->parsed()) return run_pretrain(pre);
        if (tr_cmd->parsed()) return run_train(tr);
        if (ev_cmd->parsed()) return run_evaluate(ev);
        if (gc_cmd->parsed()) return run_gradcheck(gc);
        if (rep_cmd->parsed()) return run_report(rep);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
