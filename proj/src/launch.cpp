#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <thread>

#include "kdflow/actors.hpp"
#include "kdflow/errors.hpp"

extern char** environ;

namespace kdflow {

namespace {

using Clock = std::chrono::steady_clock;

class ThreadActor final : public ActorHandle {
public:
    ThreadActor(ActorRole role, ActorEnv env) : role_(role) {
        thread_ = std::jthread([this, env = std::move(env)](std::stop_token st) mutable {
            env.stop_requested = [st] { return st.stop_requested(); };
            try {
                run_actor(role_, env);
            } catch (const ActorStopped&) {
                failure_ = "stopped";
            } catch (const std::exception& e) {
                failure_ = e.what();
            } catch (...) {
                failure_ = "unknown exception";
            }
            done_.store(true, std::memory_order_release);
        });
    }

    ~ThreadActor() override {
        thread_.request_stop();
        if (thread_.joinable()) thread_.join();
    }

    ActorRole role() const noexcept override { return role_; }
    bool alive() override { return !done_.load(std::memory_order_acquire); }
    void terminate() override { thread_.request_stop(); }

    bool join(std::chrono::milliseconds timeout) override {
        const auto deadline = Clock::now() + timeout;
        while (alive()) {
            if (Clock::now() >= deadline) return false;
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
        if (thread_.joinable()) thread_.join();
        return failure_.empty();
    }

    std::string failure() const override { return done_.load(std::memory_order_acquire) ? failure_ : ""; }

private:
    ActorRole role_;
    std::atomic<bool> done_{false};
    std::string failure_;
    std::jthread thread_;  // last: starts after the other members exist
};

class ProcessActor final : public ActorHandle {
public:
    ProcessActor(ActorRole role, pid_t pid) : role_(role), pid_(pid) {}

    ~ProcessActor() override {
        if (!reaped_) {
            ::kill(pid_, SIGKILL);
            int st = 0;
            ::waitpid(pid_, &st, 0);
        }
    }

    ActorRole role() const noexcept override { return role_; }

    bool alive() override {
        if (reaped_) return false;
        int st = 0;
        const pid_t r = ::waitpid(pid_, &st, WNOHANG);
        if (r == pid_) {
            reaped_ = true;
            status_ = st;
        }
        return !reaped_;
    }

    void terminate() override {
        if (!reaped_) ::kill(pid_, SIGTERM);
    }

    bool join(std::chrono::milliseconds timeout) override {
        const auto deadline = Clock::now() + timeout;
        while (alive()) {
            if (Clock::now() >= deadline) return false;
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
        }
        return WIFEXITED(status_) && WEXITSTATUS(status_) == 0;
    }

    std::string failure() const override {
        if (!reaped_) return "";
        if (WIFEXITED(status_))
            return WEXITSTATUS(status_) == 0 ? "" : "exit code " + std::to_string(WEXITSTATUS(status_));
        if (WIFSIGNALED(status_)) return "killed by signal " + std::to_string(WTERMSIG(status_));
        return "unknown exit status";
    }

private:
    ActorRole role_;
    pid_t pid_;
    bool reaped_ = false;
    int status_ = 0;
};

}  // namespace

std::unique_ptr<ActorHandle> spawn_thread_actor(ActorRole role, ActorEnv env) {
    return std::make_unique<ThreadActor>(role, std::move(env));
}

std::unique_ptr<ActorHandle> spawn_process_actor(ActorRole role, const std::filesystem::path& executable,
                                                 const std::string& run_id, const std::filesystem::path& config_path) {
    std::vector<std::string> args{executable.string(), "actor",  "--role",   role_name(role),
                                  "--run-id",          run_id,   "--config", config_path.string()};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    const int rc = ::posix_spawn(&pid, executable.c_str(), nullptr, nullptr, argv.data(), environ);
    if (rc != 0)
        throw ActorError("cannot start " + std::string(role_name(role)) + " actor from '" + executable.string() +
                         "': " + std::strerror(rc));
    return std::make_unique<ProcessActor>(role, pid);
}

std::string make_run_id() {
    if (const char* env = std::getenv("KDFLOW_RUN_ID"); env && *env) return env;
    static std::atomic<std::uint64_t> counter{0};
    const auto ticks = static_cast<std::uint64_t>(Clock::now().time_since_epoch().count());
    return "p" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" + std::to_string(ticks % 1000000007);
}

}  // namespace kdflow
