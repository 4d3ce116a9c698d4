#include "kdflow/protocol.hpp"

#include <cstring>

#include "kdflow/errors.hpp"

namespace kdflow {

const char* opcode_name(Opcode op) noexcept {
    switch (op) {
        case Opcode::Ready: return "ready";
        case Opcode::Shutdown: return "shutdown";
        case Opcode::Resync: return "resync";
        case Opcode::Error: return "error";
        case Opcode::Metrics: return "metrics";
        case Opcode::Step: return "step";
        case Opcode::WeightsBegin: return "weights_begin";
        case Opcode::WeightsCommit: return "weights_commit";
        case Opcode::Generate: return "generate";
        case Opcode::Responses: return "responses";
        case Opcode::Timing: return "timing";
        case Opcode::Sync: return "sync";
    }
    return "?";
}

std::vector<std::byte> encode_control(Opcode op, const nlohmann::json& body) {
    const std::string text = body.is_null() ? std::string() : body.dump();
    std::vector<std::byte> out(1 + text.size());
    out[0] = static_cast<std::byte>(op);
    std::memcpy(out.data() + 1, text.data(), text.size());
    return out;
}

Control decode_control(std::span<const std::byte> payload) {
    if (payload.empty()) throw FormatError("empty control frame");
    const auto op = static_cast<std::uint8_t>(payload[0]);
    if (op > static_cast<std::uint8_t>(Opcode::Sync)) throw FormatError("unknown control opcode " + std::to_string(op));
    Control c;
    c.op = static_cast<Opcode>(op);
    if (payload.size() > 1) {
        std::string text(reinterpret_cast<const char*>(payload.data()) + 1, payload.size() - 1);
        try {
            c.body = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("control body is not JSON: ") + e.what());
        }
    }
    return c;
}

std::optional<Control> as_control(const Frame& frame) {
    if (frame.header.kind != PayloadKind::Control) return std::nullopt;
    if (frame.header.dtype != WireType::U8) throw FormatError("control frame with non-byte payload");
    return decode_control(frame.payload);
}

std::uint64_t send_control(Channel& channel, Opcode op, const nlohmann::json& body, Channel::SendOptions options) {
    auto bytes = encode_control(op, body);
    return channel.send(PayloadKind::Control, WireType::U8, {static_cast<std::uint32_t>(bytes.size())}, bytes, options);
}

}  // namespace kdflow
