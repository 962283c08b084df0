// emef: command-line driver for the two-stage fusion pipeline.
//
//   synth-data     write synthetic exposure pairs
//   run-targets    run the four classical fusers over a pair directory
//   build-dataset  materialize training tuples (pairs plus per-fuser targets)
//   pretrain       stage one: train the style-modulated imitator
//   fuse           stage two: per-pair code search, or one of the ablations
//   eval           score fused images against their source pairs
//   report         aggregate per-pair score files into a ranked table
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "emef/errors.hpp"
#include "emef/fusers.hpp"
#include "emef/image.hpp"
#include "emef/imitator.hpp"
#include "emef/metrics.hpp"
#include "emef/rng.hpp"
#include "emef/training.hpp"
#include "emef/tuner.hpp"

namespace fs = std::filesystem;
using namespace emef;

namespace {

std::string pair_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "pair%03d", i);
    return buf;
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir))
        throw DataError("cannot create output directory: " + dir);
}

// Loads a pair directory, forwards loader warnings to stderr, and insists on
// at least one usable pair.
PairDir load_pairs_checked(const std::string& dir) {
    PairDir pd = load_pair_dir(dir);
    for (const std::string& w : pd.warnings) std::cerr << "warning: " << w << "\n";
    if (pd.pairs.empty()) throw DataError("no exposure pairs found in " + dir);
    return pd;
}

// Runs fn(0..n-1) on `jobs` threads. Results must be written to per-index
// slots so the output is identical no matter how the work interleaves.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> failures(static_cast<std::size_t>(jobs));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(jobs));
    for (int w = 0; w < jobs; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int i = next++; i < n; i = next++) fn(i);
            } catch (...) {
                failures[static_cast<std::size_t>(w)] = std::current_exception();
                next = n; // stop handing out work
            }
        });
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : failures)
        if (e) std::rethrow_exception(e);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

// ---- synth-data -------------------------------------------------------------

struct SynthOpts {
    std::string out;
    std::uint64_t seed = 0;
    int count = 8;
    int size = 64;
    int complexity = 6;
    float ev_over = 2.0f;
    float ev_under = -2.0f;
    float gamma = 2.2f;
};

void cmd_synth_data(const SynthOpts& o) {
    ensure_out_dir(o.out);
    // One scene seed per pair, derived from the run seed via the data
    // substream so other consumers of --seed cannot disturb the scenes.
    const std::uint64_t data_seed = Rng::mix(o.seed, "data");
    for (int i = 0; i < o.count; ++i) {
        const std::string name = pair_name(i);
        RadianceMap scene = synth_radiance(Rng::mix(data_seed, name), o.size, o.complexity);
        ExposurePair p = make_pair(scene, o.ev_over, o.ev_under, o.gamma);
        save_ppm(p.over, (fs::path(o.out) / (name + "_oe.ppm")).string());
        save_ppm(p.under, (fs::path(o.out) / (name + "_ue.ppm")).string());
    }
    std::cout << "wrote " << o.count << " exposure pairs to " << o.out << "\n";
}

// ---- run-targets / build-dataset ---------------------------------------------

void cmd_run_targets(const std::string& in, const std::string& out, bool with_pairs) {
    PairDir pd = load_pairs_checked(in);
    ensure_out_dir(out);
    for (std::size_t i = 0; i < pd.pairs.size(); ++i) {
        const std::string& name = pd.names[i];
        if (with_pairs) {
            save_ppm(pd.pairs[i].over, (fs::path(out) / (name + "_oe.ppm")).string());
            save_ppm(pd.pairs[i].under, (fs::path(out) / (name + "_ue.ppm")).string());
        }
        for (int id = 0; id < fuser_count(); ++id) {
            std::string file = with_pairs
                                   ? name + "_gt" + std::to_string(id) + "_" + fuser_name(id) +
                                         ".ppm"
                                   : name + "_" + fuser_name(id) + ".ppm";
            save_ppm(run_target(id, pd.pairs[i]), (fs::path(out) / file).string());
        }
    }
    std::cout << (with_pairs ? "materialized " : "fused ") << pd.pairs.size() << " pairs with "
              << fuser_count() << " targets each into " << out << "\n";
}

// ---- pretrain ----------------------------------------------------------------

struct PretrainOpts {
    std::string data;
    std::string out;
    TrainingConfig cfg;
};

void cmd_pretrain(const PretrainOpts& o) {
    PairDir pd = load_pairs_checked(o.data);
    TrainingConfig cfg = o.cfg;
    const Image& first = pd.pairs.front().over;
    if (first.height != first.width)
        throw DataError("training pairs must be square; " + pd.names.front() + " is " +
                        std::to_string(first.width) + "x" + std::to_string(first.height));
    cfg.net.input_size = first.height;
    for (std::size_t i = 1; i < pd.pairs.size(); ++i)
        if (pd.pairs[i].over.height != first.height || pd.pairs[i].over.width != first.width)
            throw DataError("training pairs must share one size; " + pd.names[i] +
                            " differs from " + pd.names.front());
    ensure_out_dir(o.out);

    std::cout << "building dataset: " << pd.pairs.size() << " pairs x " << fuser_count()
              << " targets\n";
    std::vector<TrainingSample> ds = build_dataset(pd.pairs, pd.names);
    TrainingResult res = pretrain(ds, cfg, o.out);
    std::cout << "pretrained " << cfg.epochs << " epochs on " << ds.size()
              << " pairs; fidelity loss " << std::setprecision(4)
              << res.history.front().ssim_loss << " -> " << res.history.back().ssim_loss
              << "; wrote " << (fs::path(o.out) / "imitator.emef").string() << "\n";
}

// ---- fuse ----------------------------------------------------------------------

struct FuseOpts {
    std::string in;
    std::string checkpoint;
    std::string out;
    std::string mode = "style_code";
    TunerConfig tc;
    int jobs = 1;
};

void cmd_fuse(const FuseOpts& o) {
    PairDir pd = load_pairs_checked(o.in);
    GeneratorParams<float> g = load_checkpoint(o.checkpoint);
    ensure_out_dir(o.out);

    // "imitateK" renders the deterministic soft code for target K; everything
    // else goes through the tuner.
    int imitate_id = -1;
    TunerConfig tc = o.tc;
    bool code_search = false;
    if (o.mode.rfind("imitate", 0) == 0) {
        imitate_id = std::stoi(o.mode.substr(7));
        if (imitate_id < 0 || imitate_id >= g.cfg.n_styles)
            throw ShapeError("imitation index out of range: " + o.mode);
    } else {
        tc.mode = parse_tune_mode(o.mode);
        code_search = tc.mode == TuneMode::style_code || tc.mode == TuneMode::latent_code;
    }

    const int n = static_cast<int>(pd.pairs.size());
    parallel_for(n, o.jobs, [&](int i) {
        const ExposurePair& p = pd.pairs[i];
        const std::string& name = pd.names[i];
        Image fused;
        if (imitate_id >= 0) {
            fused = generate_image(p, inference_code(imitate_id, g.cfg.n_styles), g);
        } else if (code_search) {
            TuneResult r = tune(p, g, tc);
            write_trace_csv(r, (fs::path(o.out) / (name + "_trace.csv")).string());
            fused = r.best_image;
        } else {
            fused = ablation_pick(p, g, tc);
        }
        save_ppm(fused, (fs::path(o.out) / (name + "_fused.ppm")).string());
    });
    std::cout << "fused " << n << " pairs (mode " << o.mode << ") into " << o.out << "\n";
}

// ---- eval ----------------------------------------------------------------------

struct EvalOpts {
    std::string in;
    std::string fused;
    std::string out;
    std::string pattern = "{name}_fused.ppm";
    int jobs = 1;
};

void cmd_eval(const EvalOpts& o) {
    const std::size_t slot = o.pattern.find("{name}");
    if (slot == std::string::npos)
        throw ShapeError("--pattern must contain the {name} placeholder");
    PairDir pd = load_pairs_checked(o.in);

    // Resolve and check every fused path up front so a missing file fails
    // fast rather than after scoring half the set.
    std::vector<std::string> fused_paths;
    for (const std::string& name : pd.names) {
        std::string file = o.pattern;
        file.replace(slot, 6, name);
        std::string path = (fs::path(o.fused) / file).string();
        if (!fs::is_regular_file(path)) throw DataError("missing fused image: " + path);
        fused_paths.push_back(std::move(path));
    }

    const std::vector<std::string>& metrics = default_metric_names();
    const int n = static_cast<int>(pd.pairs.size());
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
    parallel_for(n, o.jobs, [&](int i) {
        const std::vector<Image> sources = {pd.pairs[i].over, pd.pairs[i].under};
        Image fused = load_ppm(fused_paths[static_cast<std::size_t>(i)]);
        std::vector<double>& row = rows[static_cast<std::size_t>(i)];
        row.reserve(metrics.size());
        for (const std::string& m : metrics) row.push_back(eval_metric(m, sources, fused));
    });

    std::ostringstream csv;
    csv << "pair";
    for (const std::string& m : metrics) csv << ',' << m;
    csv << '\n' << std::setprecision(10);
    for (int i = 0; i < n; ++i) {
        csv << pd.names[static_cast<std::size_t>(i)];
        for (double v : rows[static_cast<std::size_t>(i)]) csv << ',' << v;
        csv << '\n';
    }
    std::ofstream f(o.out, std::ios::binary);
    if (!f) throw DataError("cannot open score file for writing: " + o.out);
    f << csv.str();
    if (!f.good()) throw DataError("score write failed: " + o.out);
    std::cout << "scored " << n << " pairs -> " << o.out << "\n";
}

// ---- report --------------------------------------------------------------------

struct ScoreFile {
    std::vector<std::string> metrics;
    std::vector<std::vector<double>> rows;
};

ScoreFile read_score_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open score file: " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError(path + ": empty score file");
    std::vector<std::string> head = split(line, ',');
    if (head.size() < 2 || head[0] != "pair")
        throw DataError(path + ": expected a 'pair,<metric>,...' header");
    ScoreFile sf;
    sf.metrics.assign(head.begin() + 1, head.end());
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells = split(line, ',');
        if (cells.size() != head.size())
            throw DataError(path + ": row has " + std::to_string(cells.size()) +
                            " cells, header has " + std::to_string(head.size()));
        std::vector<double> row;
        row.reserve(sf.metrics.size());
        for (std::size_t i = 1; i < cells.size(); ++i) {
            try {
                row.push_back(std::stod(cells[i]));
            } catch (const std::exception&) {
                throw DataError(path + ": bad number '" + cells[i] + "'");
            }
        }
        sf.rows.push_back(std::move(row));
    }
    if (sf.rows.empty()) throw DataError(path + ": no score rows");
    return sf;
}

struct ReportOpts {
    std::vector<std::string> scores; // name=path
    std::string out;
};

void cmd_report(const ReportOpts& o) {
    std::vector<std::string> methods;
    std::vector<std::string> metrics;
    std::vector<std::vector<double>> means;
    for (const std::string& spec : o.scores) {
        const std::size_t eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
            throw ShapeError("--scores entries take the form name=path: " + spec);
        const std::string name = spec.substr(0, eq);
        ScoreFile sf = read_score_csv(spec.substr(eq + 1));
        if (metrics.empty())
            metrics = sf.metrics;
        else if (metrics != sf.metrics)
            throw DataError(spec + ": metric columns differ from the first score file");
        std::vector<double> mean(metrics.size(), 0.0);
        for (const std::vector<double>& row : sf.rows)
            for (std::size_t m = 0; m < mean.size(); ++m) mean[m] += row[m];
        for (double& v : mean) v /= static_cast<double>(sf.rows.size());
        methods.push_back(name);
        means.push_back(std::move(mean));
    }

    MetricReport rep = build_report_from_scores(methods, metrics, means);
    ensure_out_dir(o.out);
    const std::string csv = report_csv(rep);
    const std::string text = report_text(rep);
    for (const auto& [file, body] :
         {std::pair<std::string, const std::string&>{"report.csv", csv},
          std::pair<std::string, const std::string&>{"report.txt", text}}) {
        const std::string path = (fs::path(o.out) / file).string();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open report for writing: " + path);
        f << body;
        if (!f.good()) throw DataError("report write failed: " + path);
    }
    std::cout << text;
}

std::string trim(const std::string& s) {
    const char* ws = " \t\r";
    const std::size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(ws) - a + 1);
}

// Expands `--config FILE` into synthetic --key=value arguments appended after
// the real command line. Keys already given explicitly are skipped, so flags
// win; unknown keys surface as unexpected-argument parse errors.
std::vector<std::string> expand_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string cfg_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size())
            cfg_path = args[i + 1];
        else if (args[i].rfind("--config=", 0) == 0)
            cfg_path = args[i].substr(9);
    }
    if (cfg_path.empty()) return args;

    std::ifstream f(cfg_path);
    if (!f) throw ShapeError("cannot open config file: " + cfg_path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = cfg_path + ":" + std::to_string(lineno);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw ShapeError(where + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ShapeError(where + ": empty key");
        if (key == "config") throw ShapeError(where + ": config files do not nest");
        const std::string flag = "--" + key;
        bool given = false;
        for (const std::string& a : args)
            if (a == flag || a.rfind(flag + "=", 0) == 0) {
                given = true;
                break;
            }
        if (!given) args.push_back(flag + "=" + value);
    }
    return args;
}

// The --config option itself is parsed (and then ignored) by CLI11; the file
// contents were already expanded into arguments by then.
void add_config_file(CLI::App* sub) {
    static std::string sink;
    sub->add_option("--config", sink,
                    "key=value defaults, # comments allowed; explicit flags win");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ensemble multi-exposure fusion pipeline"};
    app.require_subcommand(1);

    SynthOpts so;
    CLI::App* synth = app.add_subcommand("synth-data", "write synthetic exposure pairs");
    add_config_file(synth);
    synth->add_option("--out", so.out, "output directory")->required();
    synth->add_option("--seed", so.seed, "run seed")->capture_default_str();
    synth->add_option("--count", so.count, "number of pairs")->capture_default_str()
        ->check(CLI::Range(1, 100000));
    synth->add_option("--size", so.size, "square side in pixels")->capture_default_str()
        ->check(CLI::Range(16, 4096));
    synth->add_option("--complexity", so.complexity, "shapes per synthetic scene")->capture_default_str()
        ->check(CLI::Range(0, 64));
    synth->add_option("--ev-over", so.ev_over, "overexposure bias in stops")->capture_default_str();
    synth->add_option("--ev-under", so.ev_under, "underexposure bias in stops")->capture_default_str();
    synth->add_option("--gamma", so.gamma, "display gamma of the capture model")->capture_default_str()
        ->check(CLI::PositiveNumber);
    synth->callback([&] { cmd_synth_data(so); });

    std::string rt_in, rt_out;
    CLI::App* targets =
        app.add_subcommand("run-targets", "run the four classical fusers over a pair directory");
    add_config_file(targets);
    targets->add_option("--in", rt_in, "directory of <name>_oe.ppm / <name>_ue.ppm pairs")
        ->required();
    targets->add_option("--out", rt_out, "output directory")->required();
    targets->callback([&] { cmd_run_targets(rt_in, rt_out, false); });

    std::string bd_in, bd_out;
    CLI::App* dataset = app.add_subcommand(
        "build-dataset", "materialize training tuples: pairs plus per-fuser target images");
    add_config_file(dataset);
    dataset->add_option("--in", bd_in, "directory of exposure pairs")->required();
    dataset->add_option("--out", bd_out, "output directory")->required();
    dataset->callback([&] { cmd_run_targets(bd_in, bd_out, true); });

    PretrainOpts po;
    CLI::App* pre = app.add_subcommand("pretrain", "stage one: train the imitator");
    add_config_file(pre);
    pre->add_option("--data", po.data, "directory of training pairs")->required();
    pre->add_option("--out", po.out, "checkpoint/history output directory")->required();
    pre->add_option("--seed", po.cfg.seed, "run seed")->capture_default_str();
    pre->add_option("--epochs", po.cfg.epochs, "training epochs")->capture_default_str()
        ->check(CLI::Range(1, 100000));
    pre->add_option("--lr", po.cfg.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    pre->add_option("--lambda", po.cfg.lambda_adv, "adversarial weight in the generator loss")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    pre->add_option("--decay-start", po.cfg.decay_start,
                    "first epoch of linear lr decay (-1 = second half)")->capture_default_str();
    pre->add_option("--checkpoint-every", po.cfg.checkpoint_every,
                    "snapshot period in epochs (0 = none)")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    pre->add_flag("--hard-labels", po.cfg.hard_labels,
                  "train with exact one-hot codes (ablation)");
    pre->add_option("--base-channels", po.cfg.net.base_channels, "first encoder width")->capture_default_str()
        ->check(CLI::Range(1, 512));
    pre->add_option("--depth", po.cfg.net.depth, "encoder/decoder levels")->capture_default_str()
        ->check(CLI::Range(1, 8));
    pre->add_option("--d-latent", po.cfg.net.d_latent, "mapped latent width")->capture_default_str()
        ->check(CLI::Range(1, 4096));
    pre->callback([&] { cmd_pretrain(po); });

    FuseOpts fo;
    CLI::App* fuse = app.add_subcommand("fuse", "stage two: fuse pairs with a trained imitator");
    add_config_file(fuse);
    fuse->add_option("--in", fo.in, "directory of exposure pairs")->required();
    fuse->add_option("--checkpoint", fo.checkpoint, "imitator checkpoint (.emef)")->required();
    fuse->add_option("--out", fo.out, "output directory")->required();
    fuse->add_option("--mode", fo.mode,
                     "style_code | latent_code | pick_gt | pick_imitation | imitate<K>")->capture_default_str()
        ->check(CLI::IsMember({"style_code", "latent_code", "pick_gt", "pick_imitation",
                               "imitate0", "imitate1", "imitate2", "imitate3"}));
    fuse->add_option("--alpha0", fo.tc.alpha0, "initial step size")->capture_default_str()
        ->check(CLI::PositiveNumber);
    fuse->add_option("--steps", fo.tc.steps, "iteration cap")->capture_default_str()->check(CLI::Range(1, 100000));
    fuse->add_option("--window", fo.tc.decay_window, "decay window length")->capture_default_str()
        ->check(CLI::Range(1, 100000));
    fuse->add_option("--tol", fo.tc.tol, "relative loss-change stall threshold")->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    fuse->add_option("--patience", fo.tc.tol_patience, "stalled steps before stopping")->capture_default_str()
        ->check(CLI::Range(1, 100000));
    fuse->add_option("--jobs", fo.jobs, "worker threads across pairs")->capture_default_str()
        ->check(CLI::Range(1, 256));
    fuse->callback([&] { cmd_fuse(fo); });

    EvalOpts eo;
    CLI::App* ev = app.add_subcommand("eval", "score fused images against their source pairs");
    add_config_file(ev);
    ev->add_option("--in", eo.in, "directory of source exposure pairs")->required();
    ev->add_option("--fused", eo.fused, "directory of fused images")->required();
    ev->add_option("--out", eo.out, "per-pair scores CSV to write")->required();
    ev->add_option("--pattern", eo.pattern, "fused filename pattern with {name}")->capture_default_str();
    ev->add_option("--jobs", eo.jobs, "worker threads across pairs")->capture_default_str()
        ->check(CLI::Range(1, 256));
    ev->callback([&] { cmd_eval(eo); });

    ReportOpts ro;
    CLI::App* rep = app.add_subcommand("report", "rank methods from per-pair score files");
    add_config_file(rep);
    rep->add_option("--scores", ro.scores, "method entries of the form name=path.csv")
        ->required()
        ->take_all();
    rep->add_option("--out", ro.out, "directory for report.csv / report.txt")->required();
    rep->callback([&] { cmd_report(ro); });

    try {
        app.name(argv[0]);
        std::vector<std::string> args = expand_config_args(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
        return 0;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
