#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kdflow/config.hpp"
#include "kdflow/metrics.hpp"
#include "kdflow/transport.hpp"

namespace kdflow {

enum class ActorRole { Teacher, Student, Rollout, Controller };

const char* role_name(ActorRole role) noexcept;
ActorRole parse_role(const std::string& name);

/// Channel endpoint names, one per arrow of the actor graph.
struct ChannelNames {
    std::string controller_teacher;  // tokens
    std::string teacher_student;     // teacher head once, then hidden states
    std::string controller_student;  // step control, tokens + mask
    std::string controller_rollout;  // prompts
    std::string rollout_controller;  // responses
    std::string student_rollout;     // weights
    std::string student_controller;  // metrics
    std::string teacher_controller;  // readiness, errors, timings

    static ChannelNames for_run(const std::string& run_id);
    std::vector<std::string> all() const;
};

/// Everything an actor needs to run.
struct ActorEnv {
    std::string run_id;
    Backing backing = Backing::InProcess;
    KDRunConfig config;
    /// Polled by blocking loops; returning true makes the actor unwind.
    std::function<bool()> stop_requested;
};

/// Raised inside an actor loop when a stop was requested.
struct ActorStopped : std::exception {
    const char* what() const noexcept override { return "actor stopped"; }
};

void run_teacher(const ActorEnv& env);
void run_student(const ActorEnv& env);
void run_rollout(const ActorEnv& env);
void run_actor(ActorRole role, const ActorEnv& env);

/// A running actor: a thread (test mode) or a child process.
class ActorHandle {
public:
    virtual ~ActorHandle() = default;
    virtual ActorRole role() const noexcept = 0;
    /// False once the actor has exited, for whatever reason.
    virtual bool alive() = 0;
    /// Ask the actor to stop; it unwinds at its next poll.
    virtual void terminate() = 0;
    /// Waits up to `timeout` for exit; returns true on a clean exit.
    virtual bool join(std::chrono::milliseconds timeout) = 0;
    /// Exit description for diagnostics ("" while running or after success).
    virtual std::string failure() const = 0;
};

enum class ActorMode { Thread, Process };

struct LaunchOptions {
    ActorMode mode = ActorMode::Thread;
    std::filesystem::path executable;  // process mode: binary providing the `actor` subcommand
    std::string run_id;                // empty: KDFLOW_RUN_ID or a fresh id
};

std::unique_ptr<ActorHandle> spawn_thread_actor(ActorRole role, ActorEnv env);
/// Starts `<executable> actor --role R --run-id ID --config PATH`.
std::unique_ptr<ActorHandle> spawn_process_actor(ActorRole role, const std::filesystem::path& executable,
                                                 const std::string& run_id, const std::filesystem::path& config_path);

/// KDFLOW_RUN_ID if set, else a fresh id unique to this process and call.
std::string make_run_id();

struct RunResult {
    std::vector<StepMetrics> metrics;
    std::vector<double> step_done_s;  // completion time of each step since the first send
    double wall_s = 0.0;
    std::string run_id;
};

/// Drives a whole run: spawns the actors, feeds the workflow, collects
/// metrics into <output_dir>/metrics.jsonl and shuts everything down. Actor
/// failure raises ActorError after the surviving actors were stopped.
RunResult controller_run(const KDRunConfig& config, const LaunchOptions& launch);

}  // namespace kdflow
