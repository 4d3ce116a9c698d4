#pragma once

// Single-producer / single-consumer framed channel over a shared memory
// segment. The segment starts with a control block holding the two cursors;
// the ring follows. Each ring record is 64-byte aligned:
//
//   envelope  u32 tag, u32 frame_offset, u64 record_bytes
//   frame     header (see FrameHeader) followed by the payload, with the
//             payload placed on a 64-byte boundary so it can be viewed in place
//
// A record that would straddle the end of the ring is preceded by a pad record
// covering the tail, so payloads are always contiguous.
//
// The producer writes a whole record, then publishes the write cursor with
// release ordering; the consumer acquires the write cursor before reading. The
// read cursor only advances past records the consumer has finished with,
// including frames still pinned by outstanding zero-copy views.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdflow/tensor.hpp"

namespace kdflow {

inline constexpr std::uint32_t kFrameMagic = 0x4B444652;  // "KDFR"
inline constexpr std::size_t kMinChannelCapacity = std::size_t{1} << 20;
inline constexpr std::size_t kDefaultChannelCapacity = std::size_t{256} << 20;

enum class PayloadKind : std::uint8_t { Hidden = 0, Tokens = 1, Weights = 2, Control = 3 };

/// dtype byte of a frame.
enum class WireType : std::uint8_t { F32 = 0, BF16E = 1, I32 = 2, U8 = 3 };

std::size_t wire_size(WireType type);
WireType wire_type(DType dtype) noexcept;

struct FrameHeader {
    std::uint64_t sequence = 0;
    PayloadKind kind = PayloadKind::Control;
    WireType dtype = WireType::U8;
    std::vector<std::uint32_t> dims;
    std::uint64_t payload_bytes = 0;
};

/// Little-endian header bytes including the trailing CRC32.
std::vector<std::byte> encode_frame_header(const FrameHeader& header);
/// Parses and verifies a header; throws CorruptionError on bad magic or CRC.
/// `consumed` receives the header length.
FrameHeader decode_frame_header(std::span<const std::byte> bytes, std::size_t* consumed = nullptr);
std::size_t frame_header_size(std::size_t rank) noexcept;

/// A received frame that owns its payload.
struct Frame {
    FrameHeader header;
    std::vector<std::byte> payload;

    Tensor tensor() const;
    std::vector<std::int32_t> ints() const;
};

/// Header and payload dims for a tensor.
FrameHeader tensor_frame_header(PayloadKind kind, const Tensor& t);

enum class Backing { InProcess, SharedMemory };

class Channel;

namespace detail {
struct ConsumerState;
}

/// Zero-copy window onto a frame's payload inside the segment. The producer
/// cannot reuse those bytes until the view is released (explicitly or on
/// destruction). A view must not outlive its channel.
class FrameView {
public:
    FrameView() = default;
    FrameView(FrameView&& other) noexcept;
    FrameView& operator=(FrameView&& other) noexcept;
    FrameView(const FrameView&) = delete;
    FrameView& operator=(const FrameView&) = delete;
    ~FrameView();

    const FrameHeader& header() const noexcept { return header_; }
    std::span<const std::byte> payload() const noexcept { return payload_; }
    /// Payload as floats (F32 / BF16E frames only).
    std::span<const float> floats() const;
    void release();
    bool active() const noexcept { return state_ != nullptr; }

private:
    friend class Channel;
    using ConsumerState = detail::ConsumerState;
    FrameView(ConsumerState* state, std::uint64_t entry, FrameHeader header, std::span<const std::byte> payload)
        : state_(state), entry_(entry), header_(std::move(header)), payload_(payload) {}

    ConsumerState* state_ = nullptr;
    std::uint64_t entry_ = 0;
    FrameHeader header_;
    std::span<const std::byte> payload_;
};

struct ChannelLimits {
    std::size_t max_views = 32;  // outstanding unreleased views
};

class Channel {
public:
    enum class Role { Producer, Consumer };

    /// Producer end. Capacity must be a power of two >= 1 MiB.
    static Channel create(const std::string& name, std::size_t capacity, Backing backing = Backing::SharedMemory);
    /// Consumer end of an existing channel.
    static Channel attach(const std::string& name, Backing backing = Backing::SharedMemory,
                          ChannelLimits limits = ChannelLimits{});
    /// attach(), retrying NotFoundError until `timeout`.
    static Channel attach_wait(const std::string& name, Backing backing, std::chrono::milliseconds timeout,
                               ChannelLimits limits = ChannelLimits{});

    Channel(Channel&&) noexcept;
    Channel& operator=(Channel&&) noexcept;
    ~Channel();

    struct SendOptions {
        std::optional<std::uint64_t> sequence;  // default: previous + 1
        std::optional<std::chrono::milliseconds> timeout;  // default: block
    };

    /// Blocks while the ring lacks space; returns the sequence number used.
    /// An explicit sequence must exceed the previous one. A frame larger than
    /// the ring fails immediately with OversizeError; an expired timeout throws
    /// TimeoutError.
    std::uint64_t send(PayloadKind kind, WireType dtype, std::vector<std::uint32_t> dims,
                       std::span<const std::byte> payload, SendOptions options);
    std::uint64_t send(PayloadKind kind, WireType dtype, std::vector<std::uint32_t> dims,
                       std::span<const std::byte> payload) {
        return send(kind, dtype, std::move(dims), payload, SendOptions{});
    }
    std::uint64_t send_tensor(PayloadKind kind, const Tensor& t, SendOptions options);
    std::uint64_t send_tensor(PayloadKind kind, const Tensor& t) { return send_tensor(kind, t, SendOptions{}); }

    /// Next frame (payload copied out), or nullopt after `timeout`.
    std::optional<Frame> recv(std::chrono::milliseconds timeout);
    /// Next frame as an in-place view, or nullopt after `timeout`.
    std::optional<FrameView> recv_view(std::chrono::milliseconds timeout);

    /// Payload bytes copied out of the segment by this consumer.
    std::uint64_t bytes_copied() const noexcept;
    std::uint64_t write_cursor() const noexcept;
    std::uint64_t read_cursor() const noexcept;
    std::size_t capacity() const noexcept;
    bool poisoned() const noexcept;
    Role role() const noexcept;
    const std::string& name() const noexcept;
    /// Bytes a frame with this header and payload occupies in the ring.
    static std::size_t record_size(std::size_t rank, std::size_t payload_bytes) noexcept;

    /// Test hook: drop the mapping without the clean-detach bookkeeping, as a
    /// crashed process would.
    void abandon() noexcept;

    struct Impl;

private:
    explicit Channel(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

/// "kdflow.<run_id>.<src>-<dst>"
std::string channel_name(const std::string& run_id, const std::string& src, const std::string& dst);

/// B * T * dim * bytes_per_elem with overflow checking.
std::uint64_t comm_volume(std::uint64_t batch, std::uint64_t seq, std::uint64_t dim, std::uint64_t bytes_per_elem);

}  // namespace kdflow
