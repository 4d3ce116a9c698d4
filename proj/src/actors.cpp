#include "kdflow/actors.hpp"

#include <cmath>
#include <cstdlib>
#include <iostream>
#include <thread>

#include "kdflow/engine.hpp"
#include "kdflow/errors.hpp"
#include "kdflow/protocol.hpp"
#include "kdflow/rng.hpp"
#include "actor_io.hpp"

namespace kdflow {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

const char* role_name(ActorRole role) noexcept {
    switch (role) {
        case ActorRole::Teacher: return "teacher";
        case ActorRole::Student: return "student";
        case ActorRole::Rollout: return "rollout";
        case ActorRole::Controller: return "controller";
    }
    return "?";
}

ActorRole parse_role(const std::string& name) {
    if (name == "teacher") return ActorRole::Teacher;
    if (name == "student") return ActorRole::Student;
    if (name == "rollout") return ActorRole::Rollout;
    if (name == "controller") return ActorRole::Controller;
    throw ParameterError("unknown actor role '" + name + "'");
}

ChannelNames ChannelNames::for_run(const std::string& run_id) {
    ChannelNames n;
    n.controller_teacher = channel_name(run_id, "controller", "teacher");
    n.teacher_student = channel_name(run_id, "teacher", "student");
    n.controller_student = channel_name(run_id, "controller", "student");
    n.controller_rollout = channel_name(run_id, "controller", "rollout");
    n.rollout_controller = channel_name(run_id, "rollout", "controller");
    n.student_rollout = channel_name(run_id, "student", "rollout");
    n.student_controller = channel_name(run_id, "student", "controller");
    n.teacher_controller = channel_name(run_id, "teacher", "controller");
    return n;
}

std::vector<std::string> ChannelNames::all() const {
    return {controller_teacher, teacher_student,    controller_student, controller_rollout,
            rollout_controller, student_rollout,    student_controller, teacher_controller};
}

namespace actor_io {

bool stopping(const ActorEnv& env) { return env.stop_requested && env.stop_requested(); }

Channel attach_input(const std::string& name, const ActorEnv& env, const std::function<void()>& check) {
    const auto deadline = Clock::now() + std::chrono::duration<double>(env.config.actor_timeout_s);
    for (;;) {
        try {
            return Channel::attach(name, env.backing);
        } catch (const NotFoundError&) {
        } catch (const MappingError&) {
        }
        if (stopping(env)) throw ActorStopped{};
        if (check) check();
        if (Clock::now() >= deadline) throw ActorError("timed out attaching to channel '" + name + "'");
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
}

Frame recv_frame(Channel& ch, const ActorEnv& env) {
    for (;;) {
        if (auto f = ch.recv(kPoll)) return std::move(*f);
        if (stopping(env)) throw ActorStopped{};
    }
}

FrameView recv_view(Channel& ch, const ActorEnv& env) {
    for (;;) {
        if (auto v = ch.recv_view(kPoll)) return std::move(*v);
        if (stopping(env)) throw ActorStopped{};
    }
}

std::uint64_t send_frame(Channel& ch, const ActorEnv& env, PayloadKind kind, WireType dtype,
                         std::vector<std::uint32_t> dims, std::span<const std::byte> payload,
                         std::optional<std::uint64_t> sequence, const std::function<void()>& check) {
    for (;;) {
        try {
            return ch.send(kind, dtype, dims, payload, Channel::SendOptions{sequence, kPoll});
        } catch (const TimeoutError&) {
            if (stopping(env)) throw ActorStopped{};
            if (check) check();
        }
    }
}

std::uint64_t send_tensor(Channel& ch, const ActorEnv& env, PayloadKind kind, const Tensor& t,
                          std::optional<std::uint64_t> sequence) {
    std::vector<std::uint32_t> dims;
    for (auto d : t.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    return send_frame(ch, env, kind, wire_type(t.dtype()), std::move(dims), std::as_bytes(t.data()), sequence);
}

std::uint64_t send_ints(Channel& ch, const ActorEnv& env, PayloadKind kind, std::vector<std::uint32_t> dims,
                        std::span<const std::int32_t> values, std::optional<std::uint64_t> sequence,
                        const std::function<void()>& check) {
    return send_frame(ch, env, kind, WireType::I32, std::move(dims), std::as_bytes(values), sequence, check);
}

std::uint64_t send_ctrl(Channel& ch, const ActorEnv& env, Opcode op, const json& body,
                        const std::function<void()>& check) {
    auto bytes = encode_control(op, body);
    return send_frame(ch, env, PayloadKind::Control, WireType::U8, {static_cast<std::uint32_t>(bytes.size())}, bytes,
                      std::nullopt, check);
}

double elapsed_ms(const ActorEnv& env, Clock::time_point since) {
    if (!env.config.timings) return 0.0;
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

void synthetic_delay(double ms) {
    if (ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

Control expect_control(const Frame& f, const char* who) {
    auto c = as_control(f);
    if (!c) throw FormatError(std::string(who) + " expected a control frame");
    return *c;
}

}  // namespace actor_io

using namespace actor_io;

void run_teacher(const ActorEnv& env) {
    const auto& cfg = env.config;
    const auto names = ChannelNames::for_run(env.run_id);
    auto [mcfg, loaded] = load_checkpoint(cfg.teacher_checkpoint);
    const ModelWeights weights = loaded.to(cfg.teacher_precision);

    Channel to_student = Channel::create(names.teacher_student, cfg.channel_capacity, env.backing);
    Channel to_ctrl = Channel::create(names.teacher_controller, kMinChannelCapacity, env.backing);
    Channel from_ctrl = attach_input(names.controller_teacher, env);

    // The head travels once, ahead of every hidden batch, as sequence 0.
    send_tensor(to_student, env, PayloadKind::Weights, lm_head_matrix(weights), 0);
    send_ctrl(to_ctrl, env, Opcode::Ready,
              {{"role", "teacher"}, {"d_model", mcfg.d_model}, {"vocab_size", mcfg.vocab_size}});

    const double delay = cfg.teacher_delay_ms / static_cast<double>(cfg.grad_accum);
    std::size_t served = 0;
    for (;;) {
        Frame f = recv_frame(from_ctrl, env);
        if (f.header.kind == PayloadKind::Control) {
            if (expect_control(f, "teacher").op == Opcode::Shutdown) return;
            continue;
        }
        try {
            if (f.header.kind != PayloadKind::Tokens || f.header.dtype != WireType::I32 || f.header.dims.size() != 2)
                throw FormatError("teacher expects [B, T] i32 token frames");
            TokenBatch tokens{f.header.dims[0], f.header.dims[1], f.ints()};
            const auto t0 = Clock::now();
            Tensor hidden = forward_hidden(weights, mcfg, tokens);
            synthetic_delay(delay);
            const double ms = elapsed_ms(env, t0);
            send_tensor(to_student, env, PayloadKind::Hidden, hidden, f.header.sequence);
            send_ctrl(to_ctrl, env, Opcode::Timing, {{"seq", f.header.sequence}, {"ms", ms}});
        } catch (const Error& e) {
            send_ctrl(to_ctrl, env, Opcode::Error, {{"seq", f.header.sequence}, {"message", e.what()}});
        }
        if (++served == cfg.debug_teacher_crash_after) {
            if (env.backing == Backing::SharedMemory) {
                std::cerr << "teacher: injected crash after " << served << " requests\n";
                std::_Exit(3);
            }
            throw ActorError("teacher: injected crash after " + std::to_string(served) + " requests");
        }
    }
}

namespace {

void send_weights(Channel& ch, const ActorEnv& env, const ModelWeights& w, std::uint64_t version, bool forced) {
    auto tensors = w.tensors();
    send_ctrl(ch, env, Opcode::WeightsBegin, {{"version", version}, {"count", tensors.size()}, {"forced", forced}});
    for (const Tensor* t : tensors) send_tensor(ch, env, PayloadKind::Weights, *t);
    send_ctrl(ch, env, Opcode::WeightsCommit, {{"version", version}});
}

DType frame_dtype(WireType w) {
    if (w == WireType::F32) return DType::F32;
    if (w == WireType::BF16E) return DType::BF16E;
    throw FormatError("hidden frame with a non-float dtype");
}

}  // namespace

void run_student(const ActorEnv& env) {
    const auto& cfg = env.config;
    const auto names = ChannelNames::for_run(env.run_id);
    auto [scfg, sw] = load_checkpoint(cfg.student_checkpoint);
    StudentEngineConfig ec;
    ec.divergence = cfg.divergence;
    ec.temperature = cfg.temperature;
    ec.top_k = cfg.top_k;
    ec.optimizer.learning_rate = cfg.learning_rate;
    ec.optimizer.weight_decay = cfg.weight_decay;
    StudentEngine engine(scfg, std::move(sw), ec);

    std::optional<Channel> to_rollout;
    if (cfg.workflow == Workflow::OnPolicy)
        to_rollout.emplace(Channel::create(names.student_rollout, cfg.channel_capacity, env.backing));
    Channel to_ctrl = Channel::create(names.student_controller, kMinChannelCapacity, env.backing);
    Channel from_teacher = attach_input(names.teacher_student, env);
    Channel from_ctrl = attach_input(names.controller_student, env);

    Frame head_frame = recv_frame(from_teacher, env);
    if (head_frame.header.kind != PayloadKind::Weights || head_frame.header.dims.size() != 2 ||
        head_frame.header.dims[1] != scfg.vocab_size)
        throw FormatError("student expected the teacher head [d, V] as the first teacher frame");
    const Tensor head = head_frame.tensor();
    const std::size_t d_teacher = head.dim(0);
    send_ctrl(to_ctrl, env, Opcode::Ready, {{"role", "student"}});

    std::uint64_t synced_version = 0;
    for (;;) {
        Control c = expect_control(recv_frame(from_ctrl, env), "student");
        if (c.op == Opcode::Shutdown) {
            if (!cfg.output_dir.empty())
                save_checkpoint(std::filesystem::path(cfg.output_dir) / "student_final.kdck", engine.config(),
                                engine.weights());
            return;
        }
        if (c.op == Opcode::Sync) {
            if (!to_rollout) throw FormatError("sync requested without a rollout channel");
            send_weights(*to_rollout, env, engine.weights(), synced_version, true);
            continue;
        }
        if (c.op != Opcode::Step) throw FormatError(std::string("student got unexpected control ") + opcode_name(c.op));

        const auto& b = c.body;
        StepMetrics m;
        m.step = b.at("step").get<std::size_t>();
        m.epoch = b.at("epoch").get<std::size_t>();
        const auto n_micro = b.at("n_micro").get<std::size_t>();
        const double normalizer = b.at("normalizer").get<double>();
        const auto first_request = b.at("first_request").get<std::uint64_t>();
        double t_student = 0.0, t_transfer = 0.0;
        for (std::size_t j = 0; j < n_micro; ++j) {
            Frame tf = recv_frame(from_ctrl, env);
            if (tf.header.kind != PayloadKind::Tokens || tf.header.dtype != WireType::I32 ||
                tf.header.dims.size() != 3 || tf.header.dims[0] != 2)
                throw FormatError("student expects [2, B, T] token+mask frames");
            const std::size_t B = tf.header.dims[1], T = tf.header.dims[2];
            auto ints = tf.ints();
            TokenBatch tokens{B, T, std::vector<std::int32_t>(ints.begin(), ints.begin() + B * T)};
            Tensor mask({B * T});
            for (std::size_t i = 0; i < B * T; ++i) mask.data()[i] = static_cast<float>(ints[B * T + i]);

            const auto t0 = Clock::now();
            FrameView view = recv_view(from_teacher, env);
            t_transfer += elapsed_ms(env, t0);
            const auto& h = view.header();
            if (h.sequence != first_request + j)
                throw FormatError("hidden frame sequence " + std::to_string(h.sequence) + " does not match request " +
                                  std::to_string(first_request + j));
            if (h.kind != PayloadKind::Hidden || h.dims.size() != 3 || h.dims[0] != B || h.dims[1] != T ||
                h.dims[2] != d_teacher)
                throw FormatError("hidden frame shape does not match its token batch");
            const auto t1 = Clock::now();
            Tensor teacher_logits = apply_lm_head(head, view.floats(), Shape{B, T, d_teacher}, frame_dtype(h.dtype));
            m.bytes_hidden += h.payload_bytes;
            view.release();
            m.bytes_logits_equiv += comm_volume(B, T, scfg.vocab_size, sizeof(float));
            engine.micro_step(tokens, mask, teacher_logits, normalizer);
            t_student += elapsed_ms(env, t1);
        }
        const auto t2 = Clock::now();
        StepResult r = engine.finish_step();
        synthetic_delay(cfg.student_delay_ms);
        t_student += elapsed_ms(env, t2);

        if (std::isfinite(r.loss)) m.loss = r.loss;
        m.grad_norm = std::isfinite(r.grad_norm) ? r.grad_norm : 0.0;
        if (!r.applied && n_micro > 0) m.error = "non-finite loss; update skipped";
        m.t_student_ms = t_student;
        m.t_transfer_ms = t_transfer;
        if (!b.at("sync_version").is_null()) {
            if (!to_rollout) throw FormatError("weight sync requested without a rollout channel");
            synced_version = b["sync_version"].get<std::uint64_t>();
            send_weights(*to_rollout, env, engine.weights(), synced_version, false);
            m.student_crc = engine.weights().checksum();
        }
        send_ctrl(to_ctrl, env, Opcode::Metrics, json::parse(metrics_to_line(m)));
    }
}

void run_rollout(const ActorEnv& env) {
    const auto& cfg = env.config;
    const auto names = ChannelNames::for_run(env.run_id);
    auto [rcfg, rw] = load_checkpoint(cfg.effective_rollout_checkpoint());
    RolloutEngine engine(rcfg, std::move(rw), 0);

    Channel to_ctrl = Channel::create(names.rollout_controller, kMinChannelCapacity, env.backing);
    Channel from_ctrl = attach_input(names.controller_rollout, env);
    Channel from_student = attach_input(names.student_rollout, env);
    send_ctrl(to_ctrl, env, Opcode::Ready, {{"role", "rollout"}});

    bool discarding = false;
    auto pump_weights = [&] {
        Frame f = recv_frame(from_student, env);
        if (f.header.kind == PayloadKind::Weights) {
            if (!discarding) engine.stage(f.tensor());
            return;
        }
        Control c = expect_control(f, "rollout");
        if (c.op == Opcode::WeightsBegin) {
            const auto version = c.body.at("version").get<std::uint64_t>();
            const auto status = engine.begin(version, c.body.at("count").get<std::size_t>(),
                                             c.body.at("forced").get<bool>());
            discarding = status == RolloutEngine::BeginStatus::Gap;
            if (discarding)
                send_ctrl(to_ctrl, env, Opcode::Resync, {{"have", engine.version()}, {"offered", version}});
        } else if (c.op == Opcode::WeightsCommit) {
            if (!discarding) engine.commit(c.body.at("version").get<std::uint64_t>());
        } else {
            throw FormatError(std::string("rollout got unexpected weight-channel control ") + opcode_name(c.op));
        }
    };

    for (;;) {
        Control c = expect_control(recv_frame(from_ctrl, env), "rollout");
        if (c.op == Opcode::Shutdown) return;
        if (c.op != Opcode::Generate) throw FormatError(std::string("rollout got unexpected control ") + opcode_name(c.op));
        const auto& b = c.body;
        Frame pf = recv_frame(from_ctrl, env);
        if (pf.header.kind != PayloadKind::Tokens || pf.header.dims.size() != 2)
            throw FormatError("rollout expects a [N, P] prompt frame");
        const std::size_t n = pf.header.dims[0], p = pf.header.dims[1];
        auto ints = pf.ints();
        std::vector<std::vector<std::int32_t>> prompts(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t t = 0; t < p && ints[i * p + t] >= 0; ++t) prompts[i].push_back(ints[i * p + t]);

        const auto min_version = b.at("min_version").get<std::uint64_t>();
        while (engine.version() < min_version || engine.receiving()) pump_weights();

        SamplingParams sp;
        sp.max_new = b.at("max_new").get<std::size_t>();
        sp.temperature = b.at("temperature").get<float>();
        sp.seed = b.at("seed").get<std::uint64_t>();
        sp.eos_id = b.at("eos_id").get<std::int32_t>();
        auto snap = engine.snapshot();
        auto [version, outs] = engine.generate(prompts, sp);
        std::size_t width = 1;
        for (const auto& o : outs) width = std::max(width, o.size());
        std::vector<std::int32_t> flat(n * width, -1);
        for (std::size_t i = 0; i < n; ++i) std::copy(outs[i].begin(), outs[i].end(), flat.begin() + i * width);
        send_ctrl(to_ctrl, env, Opcode::Responses,
                  {{"step", b.at("step")}, {"version", version}, {"crc", snap->weights.checksum()}});
        send_ints(to_ctrl, env, PayloadKind::Tokens, {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(width)},
                  flat);
    }
}

void run_actor(ActorRole role, const ActorEnv& env) {
    switch (role) {
        case ActorRole::Teacher: return run_teacher(env);
        case ActorRole::Student: return run_student(env);
        case ActorRole::Rollout: return run_rollout(env);
        case ActorRole::Controller: break;
    }
    throw ParameterError("the controller is not a spawnable actor");
}

}  // namespace kdflow
