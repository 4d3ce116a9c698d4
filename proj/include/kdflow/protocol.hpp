#pragma once

// Control frames between actors: payload kind Control, dtype U8, payload =
// one opcode byte followed by an optional JSON body.

#include <chrono>
#include <cstdint>
#include <optional>

#include <json.hpp>

#include "kdflow/transport.hpp"

namespace kdflow {

enum class Opcode : std::uint8_t {
    Ready = 0,
    Shutdown = 1,
    Resync = 2,
    Error = 3,
    // Extensions used by the training loop.
    Metrics = 4,
    Step = 5,
    WeightsBegin = 6,
    WeightsCommit = 7,
    Generate = 8,
    Responses = 9,
    Timing = 10,
    Sync = 11,
};

const char* opcode_name(Opcode op) noexcept;

struct Control {
    Opcode op = Opcode::Ready;
    nlohmann::json body;  // null when the frame carries only the opcode
};

std::vector<std::byte> encode_control(Opcode op, const nlohmann::json& body = nullptr);
Control decode_control(std::span<const std::byte> payload);
/// The control message in `frame`, or nullopt for a non-control frame.
std::optional<Control> as_control(const Frame& frame);

std::uint64_t send_control(Channel& channel, Opcode op, const nlohmann::json& body = nullptr,
                           Channel::SendOptions options = {});

}  // namespace kdflow
