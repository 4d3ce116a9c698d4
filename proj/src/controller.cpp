#include <sys/mman.h>

#include <deque>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include "actor_io.hpp"
#include "kdflow/actors.hpp"
#include "kdflow/dataset.hpp"
#include "kdflow/errors.hpp"
#include "kdflow/protocol.hpp"
#include "kdflow/rng.hpp"

namespace kdflow {

using nlohmann::json;
using Clock = std::chrono::steady_clock;
using namespace actor_io;

namespace {

struct Inflight {
    std::size_t step = 0;
    std::uint64_t first_request = 0;
    std::size_t n_micro = 0;
    std::optional<std::uint64_t> rollout_version;
    std::optional<std::uint32_t> rollout_crc;
    bool skipped = false;
};

class Controller {
public:
    Controller(const KDRunConfig& config, const LaunchOptions& launch) : cfg_(config), launch_(launch) {}

    RunResult run();

private:
    void setup();
    void shutdown();
    void abort_all() noexcept;
    void check_alive();
    void poll_teacher();
    void poll_all() {
        poll_teacher();
        check_alive();
    }
    Frame await_frame(Channel& ch, const char* what);
    Control await_control(Channel& ch, const char* what);
    void dispatch(const StepBatch& batch, Inflight inf, std::optional<std::uint64_t> sync_version);
    void collect();
    void run_off_policy();
    void run_on_policy();

    KDRunConfig cfg_;
    LaunchOptions launch_;
    ActorEnv env_;
    ChannelNames names_;
    ModelConfig teacher_cfg_, student_cfg_;
    std::optional<BatchBuilder> builder_;
    std::filesystem::path out_dir_;
    std::ofstream log_;

    std::vector<std::unique_ptr<ActorHandle>> actors_;
    std::optional<Channel> to_teacher_, to_student_, to_rollout_;
    std::optional<Channel> from_teacher_, from_student_, from_rollout_;

    std::uint64_t next_request_ = 1;
    std::deque<Inflight> inflight_;
    std::map<std::uint64_t, double> teacher_ms_;
    Clock::time_point t0_;
    RunResult result_;
};

void Controller::check_alive() {
    for (auto& a : actors_)
        if (!a->alive()) {
            const std::string why = a->failure();
            throw ActorError(std::string(role_name(a->role())) + " actor exited unexpectedly" +
                             (why.empty() ? "" : ": " + why));
        }
}

void Controller::poll_teacher() {
    if (!from_teacher_) return;
    while (auto f = from_teacher_->recv(std::chrono::milliseconds(0))) {
        Control c = expect_control(*f, "controller");
        if (c.op == Opcode::Timing) {
            teacher_ms_[c.body.at("seq").get<std::uint64_t>()] = c.body.at("ms").get<double>();
        } else if (c.op == Opcode::Error) {
            throw ActorError("teacher reported an error: " + c.body.value("message", std::string("?")));
        }
    }
}

Frame Controller::await_frame(Channel& ch, const char* what) {
    const auto deadline = Clock::now() + std::chrono::duration<double>(cfg_.actor_timeout_s);
    for (;;) {
        if (auto f = ch.recv(kPoll)) return std::move(*f);
        poll_all();
        if (Clock::now() >= deadline) throw ActorError(std::string("timed out waiting for ") + what);
    }
}

Control Controller::await_control(Channel& ch, const char* what) {
    Control c = expect_control(await_frame(ch, what), "controller");
    if (c.op == Opcode::Error)
        throw ActorError(std::string("actor error while waiting for ") + what + ": " +
                         c.body.value("message", std::string("?")));
    return c;
}

void Controller::setup() {
    validate_config(cfg_);
    teacher_cfg_ = load_checkpoint(cfg_.teacher_checkpoint).first;
    student_cfg_ = load_checkpoint(cfg_.student_checkpoint).first;
    validate_against_models(cfg_, teacher_cfg_, student_cfg_);
    if (cfg_.workflow == Workflow::OnPolicy) {
        const auto rollout_cfg = load_checkpoint(cfg_.effective_rollout_checkpoint()).first;
        if (!(rollout_cfg == student_cfg_))
            throw ConfigError("rollout_checkpoint", "rollout model must have the student's architecture");
    }
    builder_.emplace(load_dataset(cfg_.dataset), cfg_.global_batch, cfg_.grad_accum, cfg_.max_len, cfg_.eos_id,
                     student_cfg_.vocab_size);

    out_dir_ = cfg_.output_dir;
    std::filesystem::create_directories(out_dir_);
    const auto config_path = out_dir_ / "effective_config.json";
    {
        std::ofstream out(config_path);
        out << config_to_json(cfg_).dump(2) << '\n';
        if (!out) throw IoError("cannot write '" + config_path.string() + "'");
    }
    log_.open(out_dir_ / "metrics.jsonl", std::ios::trunc);
    if (!log_) throw IoError("cannot write metrics log in '" + out_dir_.string() + "'");

    env_.run_id = launch_.run_id.empty() ? make_run_id() : launch_.run_id;
    env_.backing = launch_.mode == ActorMode::Process ? Backing::SharedMemory : Backing::InProcess;
    env_.config = cfg_;
    result_.run_id = env_.run_id;
    names_ = ChannelNames::for_run(env_.run_id);

    const bool on_policy = cfg_.workflow == Workflow::OnPolicy;
    to_teacher_.emplace(Channel::create(names_.controller_teacher, kMinChannelCapacity * 16, env_.backing));
    to_student_.emplace(Channel::create(names_.controller_student, kMinChannelCapacity * 16, env_.backing));
    if (on_policy)
        to_rollout_.emplace(Channel::create(names_.controller_rollout, kMinChannelCapacity * 16, env_.backing));

    std::vector<ActorRole> roles{ActorRole::Teacher, ActorRole::Student};
    if (on_policy) roles.push_back(ActorRole::Rollout);
    for (ActorRole r : roles) {
        if (launch_.mode == ActorMode::Process) {
            if (launch_.executable.empty()) throw ParameterError("process mode needs the actor executable path");
            actors_.push_back(spawn_process_actor(r, launch_.executable, env_.run_id, config_path));
        } else {
            actors_.push_back(spawn_thread_actor(r, env_));
        }
    }

    auto check = [this] { check_alive(); };
    from_teacher_.emplace(attach_input(names_.teacher_controller, env_, check));
    from_student_.emplace(attach_input(names_.student_controller, env_, check));
    if (on_policy) from_rollout_.emplace(attach_input(names_.rollout_controller, env_, check));

    auto ready = [&](Channel& ch, const char* who) {
        Control c = await_control(ch, who);
        if (c.op != Opcode::Ready) throw ActorError(std::string(who) + " did not report ready");
    };
    // The teacher's channel also carries timings, so read its ready frame directly.
    ready(*from_teacher_, "teacher readiness");
    ready(*from_student_, "student readiness");
    if (on_policy) ready(*from_rollout_, "rollout readiness");
}

void Controller::dispatch(const StepBatch& batch, Inflight inf, std::optional<std::uint64_t> sync_version) {
    auto check = [this] { poll_all(); };
    inf.step = batch.step;
    inf.first_request = next_request_;
    inf.n_micro = batch.micro.size();
    for (const auto& mb : batch.micro)
        send_ints(*to_teacher_, env_, PayloadKind::Tokens,
                  {static_cast<std::uint32_t>(mb.tokens.batch), static_cast<std::uint32_t>(mb.tokens.seq)},
                  mb.tokens.ids, next_request_++, check);
    json body = {{"step", batch.step},
                 {"epoch", batch.epoch},
                 {"n_micro", batch.micro.size()},
                 {"normalizer", static_cast<double>(std::max<std::size_t>(1, batch.unmasked))},
                 {"first_request", inf.first_request},
                 {"sync_version", sync_version ? json(*sync_version) : json(nullptr)}};
    send_ctrl(*to_student_, env_, Opcode::Step, body, check);
    for (const auto& mb : batch.micro) {
        const std::size_t n = mb.tokens.ids.size();
        std::vector<std::int32_t> packed(2 * n);
        std::copy(mb.tokens.ids.begin(), mb.tokens.ids.end(), packed.begin());
        for (std::size_t i = 0; i < n; ++i) packed[n + i] = mb.mask.data()[i] != 0.0f ? 1 : 0;
        send_ints(*to_student_, env_, PayloadKind::Tokens,
                  {2, static_cast<std::uint32_t>(mb.tokens.batch), static_cast<std::uint32_t>(mb.tokens.seq)}, packed,
                  std::nullopt, check);
    }
    inflight_.push_back(inf);
}

void Controller::collect() {
    Inflight inf = inflight_.front();
    inflight_.pop_front();
    Control c = await_control(*from_student_, "student metrics");
    if (c.op != Opcode::Metrics) throw ActorError(std::string("expected metrics, got ") + opcode_name(c.op));
    StepMetrics m = metrics_from_line(c.body.dump());
    if (m.step != inf.step)
        throw ActorError("metrics for step " + std::to_string(m.step) + " arrived while expecting step " +
                         std::to_string(inf.step));
    double teacher_ms = 0.0;
    const auto deadline = Clock::now() + std::chrono::duration<double>(cfg_.actor_timeout_s);
    for (std::uint64_t r = inf.first_request; r < inf.first_request + inf.n_micro; ++r) {
        while (!teacher_ms_.count(r)) {
            poll_all();
            if (teacher_ms_.count(r)) break;
            if (Clock::now() >= deadline) throw ActorError("timed out waiting for teacher timing");
            std::this_thread::sleep_for(std::chrono::microseconds(200));
        }
        teacher_ms += teacher_ms_[r];
        teacher_ms_.erase(r);
    }
    m.t_teacher_ms = teacher_ms;
    m.rollout_version = inf.rollout_version;
    m.rollout_crc = inf.rollout_crc;
    if (inf.skipped) {
        m.skipped = true;
        m.error = "no unmasked tokens; step skipped";
    }
    write_metrics_line(log_, m);
    log_.flush();
    result_.metrics.push_back(std::move(m));
    result_.step_done_s.push_back(std::chrono::duration<double>(Clock::now() - t0_).count());
}

void Controller::run_off_policy() {
    for (std::size_t s = 0; s < cfg_.total_steps; ++s) {
        // Double buffering: step s goes out once step s-2 has reported.
        while (inflight_.size() >= 2) collect();
        dispatch(builder_->build(s), Inflight{}, std::nullopt);
    }
    while (!inflight_.empty()) collect();
}

void Controller::run_on_policy() {
    auto check = [this] { poll_all(); };
    const std::uint32_t vocab = student_cfg_.vocab_size;
    for (std::size_t s = 0; s < cfg_.total_steps; ++s) {
        auto samples = builder_->samples(s);
        std::size_t width = 1;
        for (const auto& smp : samples) width = std::max(width, smp.prompt.size());
        std::vector<std::int32_t> prompts(samples.size() * width, -1);
        for (std::size_t i = 0; i < samples.size(); ++i)
            std::copy(samples[i].prompt.begin(), samples[i].prompt.end(), prompts.begin() + i * width);
        const std::uint64_t min_version = s / cfg_.sync_interval * cfg_.sync_interval;
        send_ctrl(*to_rollout_, env_, Opcode::Generate,
                  {{"step", s},
                   {"min_version", min_version},
                   {"seed", derive_seed(cfg_.seed, s, 0x524F4C4Cull)},
                   {"max_new", cfg_.max_new_tokens},
                   {"temperature", cfg_.rollout_temperature},
                   {"eos_id", cfg_.eos_id}},
                  check);
        send_ints(*to_rollout_, env_, PayloadKind::Tokens,
                  {static_cast<std::uint32_t>(samples.size()), static_cast<std::uint32_t>(width)}, prompts,
                  std::nullopt, check);

        Control resp;
        for (;;) {
            resp = await_control(*from_rollout_, "rollout responses");
            if (resp.op == Opcode::Responses) break;
            if (resp.op == Opcode::Resync) {
                send_ctrl(*to_student_, env_, Opcode::Sync, nullptr, check);
                continue;
            }
            throw ActorError(std::string("unexpected rollout control ") + opcode_name(resp.op));
        }
        Frame gen = await_frame(*from_rollout_, "rollout tokens");
        if (gen.header.kind != PayloadKind::Tokens || gen.header.dims.size() != 2 ||
            gen.header.dims[0] != samples.size())
            throw ActorError("rollout returned a malformed response frame");
        const std::size_t gw = gen.header.dims[1];
        auto ids = gen.ints();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            samples[i].response.clear();
            for (std::size_t t = 0; t < gw && ids[i * gw + t] >= 0; ++t) samples[i].response.push_back(ids[i * gw + t]);
        }

        Inflight inf;
        inf.rollout_version = resp.body.at("version").get<std::uint64_t>();
        inf.rollout_crc = resp.body.at("crc").get<std::uint32_t>();
        StepBatch batch =
            make_step_batch(s, builder_->epoch(s), samples, cfg_.grad_accum, cfg_.max_len, cfg_.eos_id, vocab);
        std::optional<std::uint64_t> sync;
        if ((s + 1) % cfg_.sync_interval == 0) sync = s + 1;
        if (batch.unmasked == 0) {
            // Nothing to learn from; the student still takes part so the
            // weight version advances on schedule.
            inf.skipped = true;
            batch.micro.clear();
        }
        while (inflight_.size() >= 2) collect();
        dispatch(batch, inf, sync);
    }
    while (!inflight_.empty()) collect();
}

void Controller::shutdown() {
    auto check = [this] { check_alive(); };
    send_ctrl(*to_teacher_, env_, Opcode::Shutdown, nullptr, check);
    send_ctrl(*to_student_, env_, Opcode::Shutdown, nullptr, check);
    if (to_rollout_) send_ctrl(*to_rollout_, env_, Opcode::Shutdown, nullptr, check);
    const auto timeout = std::chrono::milliseconds(static_cast<std::int64_t>(cfg_.actor_timeout_s * 1000));
    for (auto& a : actors_)
        if (!a->join(timeout))
            throw ActorError(std::string(role_name(a->role())) + " actor did not shut down cleanly" +
                             (a->failure().empty() ? "" : ": " + a->failure()));
}

void Controller::abort_all() noexcept {
    for (auto& a : actors_) a->terminate();
    for (auto& a : actors_) a->join(std::chrono::seconds(5));
    actors_.clear();
}

RunResult Controller::run() {
    try {
        setup();
        t0_ = Clock::now();
        if (cfg_.workflow == Workflow::OffPolicy)
            run_off_policy();
        else
            run_on_policy();
        result_.wall_s = std::chrono::duration<double>(Clock::now() - t0_).count();
        shutdown();
    } catch (const ConfigError&) {
        abort_all();
        throw;
    } catch (const DatasetError&) {
        abort_all();
        throw;
    } catch (const std::exception& e) {
        abort_all();
        if (launch_.mode == ActorMode::Process)
            for (const auto& n : names_.all()) ::shm_unlink(("/" + n).c_str());
        if (dynamic_cast<const ActorError*>(&e)) throw;
        throw ActorError(e.what());
    }
    return std::move(result_);
}

}  // namespace

RunResult controller_run(const KDRunConfig& config, const LaunchOptions& launch) {
    Controller c(config, launch);
    return c.run();
}

}  // namespace kdflow
