#include "kdflow/cli.hpp"

#include <signal.h>
#include <sys/prctl.h>
#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>

#include <CLI11.hpp>

#include "kdflow/actors.hpp"
#include "kdflow/errors.hpp"
#include "kdflow/metrics.hpp"
#include "kdflow/oracle.hpp"
#include "kdflow/workflows.hpp"

namespace kdflow {

namespace {

constexpr const char* kFooter = R"(Exit codes:
  0  success
  1  runtime failure (actor died, I/O error); compare: deviation above tolerance
  2  invalid config or arguments (the offending field is named); compare: step-count mismatch

Files:
  config      flat JSON object keyed by run-config field names
  dataset     JSON lines with integer arrays "prompt_ids" and "response_ids"
  metrics     JSON lines: step, epoch, loss, grad_norm, [rollout_version],
              t_teacher_ms, t_student_ms, t_transfer_ms, bytes_hidden, bytes_logits_equiv,
              on-policy only: rollout_crc, student_crc, skipped, error
  checkpoint  "KDCK" header, model config, weight tensors in "KDT1" format

Environment:
  KDFLOW_RUN_ID  overrides the run id used to name shared-memory channels)";

std::atomic<bool> g_actor_stop{false};

extern "C" void on_sigterm(int) { g_actor_stop.store(true); }

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

KDRunConfig load_with_overrides(const std::string& path, const std::string& workflow,
                                const std::optional<std::uint64_t>& seed) {
    KDRunConfig c = load_config(path);
    if (!workflow.empty()) c.workflow = parse_workflow(workflow);
    if (seed) c.seed = *seed;
    validate_config(c);
    return c;
}

int cmd_compare(const std::string& a, const std::string& b, double tolerance, std::ostream& out, std::ostream& err) {
    const auto la = read_metrics_log(a);
    const auto lb = read_metrics_log(b);
    if (la.size() != lb.size()) {
        err << "kdflow: step-count mismatch: " << la.size() << " vs " << lb.size() << " records\n";
        return 2;
    }
    double max_dev = 0.0, sum_dev = 0.0;
    out << "step loss_a loss_b abs_dev\n";
    for (std::size_t i = 0; i < la.size(); ++i) {
        const auto& x = la[i].loss;
        const auto& y = lb[i].loss;
        double dev = 0.0;
        if (x.has_value() != y.has_value())
            dev = std::numeric_limits<double>::infinity();
        else if (x)
            dev = std::abs(*x - *y);
        max_dev = std::max(max_dev, dev);
        sum_dev += dev;
        out << la[i].step << ' ' << (x ? fmt_double(*x) : "null") << ' ' << (y ? fmt_double(*y) : "null") << ' '
            << fmt_double(dev) << '\n';
    }
    const double mean = la.empty() ? 0.0 : sum_dev / static_cast<double>(la.size());
    const bool ok = max_dev <= tolerance;
    out << "max_abs_dev " << fmt_double(max_dev) << '\n';
    out << "mean_abs_dev " << fmt_double(mean) << '\n';
    out << "within_tolerance " << (ok ? "true" : "false") << '\n';
    return ok ? 0 : 1;
}

int cmd_actor(const std::string& role, const std::string& run_id, const std::string& config_path) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    struct sigaction sa {};
    sa.sa_handler = on_sigterm;
    ::sigaction(SIGTERM, &sa, nullptr);
    ActorEnv env;
    env.run_id = run_id;
    env.backing = Backing::SharedMemory;
    env.config = load_config(config_path);
    env.stop_requested = [] { return g_actor_stop.load() || ::getppid() == 1; };
    try {
        run_actor(parse_role(role), env);
    } catch (const ActorStopped&) {
        return 0;
    }
    return 0;
}

}  // namespace

int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"kdflow: decoupled knowledge distillation at desk scale", "kdflow"};
    app.footer(kFooter);
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    std::string config_path, workflow, out_path, mode = "process", log_a, log_b, role, run_id, fixture_config;
    std::optional<std::uint64_t> seed;
    double tolerance = 0.0, teacher_delay = 100.0, student_delay = 100.0;
    std::optional<std::size_t> steps;

    auto* run = app.add_subcommand("run", "Run a distillation workflow through the actor pipeline");
    run->add_option("--config", config_path, "Run config (JSON)")->required();
    run->add_option("--workflow", workflow, "Override the workflow: off_policy | on_policy");
    run->add_option("--seed", seed, "Override the seed");
    run->add_option("--mode", mode, "Actor isolation: process | thread")->check(CLI::IsMember({"process", "thread"}));

    auto* oracle = app.add_subcommand("oracle", "Run the single-process reference distillation (off-policy)");
    oracle->add_option("--config", config_path, "Run config (JSON)")->required();
    oracle->add_option("--seed", seed, "Override the seed");
    oracle->add_option("--out", out_path, "Metrics log path (default <output_dir>/oracle_metrics.jsonl)");

    auto* fixtures = app.add_subcommand("gen-fixtures", "Write checkpoints, a dataset and a run config");
    fixtures->add_option("--out", out_path, "Output directory")->required();
    fixtures->add_option("--config", fixture_config, "Fixture parameters (JSON)");
    fixtures->add_option("--seed", seed, "Override the fixture seed");

    auto* compare = app.add_subcommand("compare", "Per-step loss deviation between two metrics logs");
    compare->add_option("log_a", log_a, "First metrics log")->required();
    compare->add_option("log_b", log_b, "Second metrics log")->required();
    compare->add_option("--tolerance", tolerance, "Largest accepted |loss_a - loss_b| (default 0)");

    auto* bench = app.add_subcommand("bench", "Pipelined vs serialized throughput with synthetic stage costs");
    bench->add_option("--config", config_path, "Run config (JSON)")->required();
    bench->add_option("--teacher-delay-ms", teacher_delay, "Synthetic teacher cost per step (default 100)");
    bench->add_option("--student-delay-ms", student_delay, "Synthetic student cost per step (default 100)");
    bench->add_option("--steps", steps, "Override total_steps");

    auto* actor = app.add_subcommand("actor", "");  // internal: spawned by `run`
    actor->add_option("--role", role)->required();
    actor->add_option("--run-id", run_id)->required();
    actor->add_option("--config", config_path)->required();
    actor->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "kdflow: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*run) {
            KDRunConfig c = load_with_overrides(config_path, workflow, seed);
            LaunchOptions launch;
            launch.mode = mode == "thread" ? ActorMode::Thread : ActorMode::Process;
            if (launch.mode == ActorMode::Process) launch.executable = std::filesystem::read_symlink("/proc/self/exe");
            RunResult r = run_workflow(c, launch);
            out << "run " << r.run_id << ": " << r.metrics.size() << " steps, metrics in "
                << (std::filesystem::path(c.output_dir) / "metrics.jsonl").string() << '\n';
            return 0;
        }
        if (*oracle) {
            KDRunConfig c = load_with_overrides(config_path, "", seed);
            const std::filesystem::path log =
                out_path.empty() ? std::filesystem::path(c.output_dir) / "oracle_metrics.jsonl" : std::filesystem::path(out_path);
            auto m = run_oracle(c, log);
            out << "oracle: " << m.size() << " steps, metrics in " << log.string() << '\n';
            return 0;
        }
        if (*fixtures) {
            FixtureSpec spec;
            if (!fixture_config.empty()) {
                std::ifstream in(fixture_config);
                if (!in) throw ConfigError("--config", "cannot read '" + fixture_config + "'");
                nlohmann::json j;
                try {
                    j = nlohmann::json::parse(in);
                } catch (const nlohmann::json::parse_error& e) {
                    throw ConfigError("--config", e.what());
                }
                spec = parse_fixture_spec(j);
            }
            if (seed) spec.seed = *seed;
            gen_fixtures(out_path, spec);
            out << "fixtures written to " << out_path << '\n';
            return 0;
        }
        if (*compare) return cmd_compare(log_a, log_b, tolerance, out, err);
        if (*bench) {
            KDRunConfig c = load_with_overrides(config_path, "", std::nullopt);
            if (steps) c.total_steps = *steps;
            out << bench_report_json(bench_pipeline(c, teacher_delay, student_delay)).dump(2) << '\n';
            return 0;
        }
        if (*actor) return cmd_actor(role, run_id, config_path);
    } catch (const ConfigError& e) {
        err << "kdflow: " << e.what() << '\n';
        return 2;
    } catch (const DatasetError& e) {
        err << "kdflow: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "kdflow: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace kdflow
