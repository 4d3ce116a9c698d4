#pragma once

// Stop-aware blocking helpers shared by the actor loops and the controller.

#include <chrono>
#include <functional>
#include <optional>

#include "kdflow/actors.hpp"
#include "kdflow/protocol.hpp"

namespace kdflow::actor_io {

inline constexpr std::chrono::milliseconds kPoll{20};

bool stopping(const ActorEnv& env);

/// Attach as consumer, retrying until the producer exists. `check` runs
/// between attempts and may throw to abort.
Channel attach_input(const std::string& name, const ActorEnv& env, const std::function<void()>& check = {});

Frame recv_frame(Channel& ch, const ActorEnv& env);
FrameView recv_view(Channel& ch, const ActorEnv& env);

std::uint64_t send_frame(Channel& ch, const ActorEnv& env, PayloadKind kind, WireType dtype,
                         std::vector<std::uint32_t> dims, std::span<const std::byte> payload,
                         std::optional<std::uint64_t> sequence = std::nullopt,
                         const std::function<void()>& check = {});
std::uint64_t send_tensor(Channel& ch, const ActorEnv& env, PayloadKind kind, const Tensor& t,
                          std::optional<std::uint64_t> sequence = std::nullopt);
std::uint64_t send_ints(Channel& ch, const ActorEnv& env, PayloadKind kind, std::vector<std::uint32_t> dims,
                        std::span<const std::int32_t> values, std::optional<std::uint64_t> sequence = std::nullopt,
                        const std::function<void()>& check = {});
std::uint64_t send_ctrl(Channel& ch, const ActorEnv& env, Opcode op, const nlohmann::json& body = nullptr,
                        const std::function<void()>& check = {});

/// Wall-clock milliseconds since `since`, or 0 when timings are disabled.
double elapsed_ms(const ActorEnv& env, std::chrono::steady_clock::time_point since);
void synthetic_delay(double ms);
Control expect_control(const Frame& f, const char* who);

}  // namespace kdflow::actor_io
