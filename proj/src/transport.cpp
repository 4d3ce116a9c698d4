#include "kdflow/transport.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>
#include <new>
#include <thread>

#include "kdflow/errors.hpp"

namespace kdflow {

namespace {

constexpr std::uint64_t kSegmentMagic = 0x3130304745534B44ull;  // "KDSEG001"
constexpr std::uint32_t kTagFrame = 0x43455246;                 // "FREC"
constexpr std::uint32_t kTagPad = 0x52444150;                   // "PADR"
constexpr std::size_t kRecordAlign = 64;
constexpr std::size_t kEnvelopeBytes = 16;

struct alignas(64) SegmentHeader {
    std::atomic<std::uint64_t> magic;
    std::uint64_t capacity;
    alignas(64) std::atomic<std::uint64_t> write;
    alignas(64) std::atomic<std::uint64_t> read;
    alignas(64) std::atomic<std::uint32_t> poisoned;
    std::atomic<std::uint32_t> consumer_active;
    std::atomic<std::uint32_t> producer_active;
};

static_assert(std::atomic<std::uint64_t>::is_always_lock_free);
static_assert(sizeof(SegmentHeader) % kRecordAlign == 0);

constexpr std::size_t align_up(std::size_t n, std::size_t a) { return (n + a - 1) / a * a; }

struct Envelope {
    std::uint32_t tag;
    std::uint32_t frame_offset;
    std::uint64_t record_bytes;
};
static_assert(sizeof(Envelope) == kEnvelopeBytes);

/// Spin, then yield, then sleep until `ready()` or the deadline passes.
template <typename Ready, typename Check>
bool wait_for(Ready&& ready, Check&& check, std::optional<std::chrono::steady_clock::time_point> deadline) {
    for (std::uint32_t iter = 0;; ++iter) {
        if (ready()) return true;
        check();
        if (deadline && std::chrono::steady_clock::now() >= *deadline) return false;
        if (iter < 64) continue;
        if (iter < 512)
            std::this_thread::yield();
        else
            std::this_thread::sleep_for(std::chrono::microseconds(100));
    }
}

// In-process segments live in an aligned heap block registered by name.
struct HeapSegment {
    explicit HeapSegment(std::size_t bytes) : size(bytes) {
        mem = ::operator new(bytes, std::align_val_t{kRecordAlign});
        std::memset(mem, 0, bytes);
    }
    ~HeapSegment() { ::operator delete(mem, std::align_val_t{kRecordAlign}); }
    HeapSegment(const HeapSegment&) = delete;
    HeapSegment& operator=(const HeapSegment&) = delete;
    void* mem;
    std::size_t size;
};

std::mutex& registry_mutex() {
    static std::mutex m;
    return m;
}
std::map<std::string, std::weak_ptr<HeapSegment>>& registry() {
    static std::map<std::string, std::weak_ptr<HeapSegment>> r;
    return r;
}

std::string shm_path(const std::string& name) { return "/" + name; }

}  // namespace

std::size_t wire_size(WireType type) {
    switch (type) {
        case WireType::F32:
        case WireType::BF16E:
        case WireType::I32: return 4;
        case WireType::U8: return 1;
    }
    throw CorruptionError("unknown wire dtype");
}

WireType wire_type(DType dtype) noexcept { return dtype == DType::BF16E ? WireType::BF16E : WireType::F32; }

std::size_t frame_header_size(std::size_t rank) noexcept { return 4 + 8 + 1 + 1 + 1 + 4 * rank + 8 + 4; }

std::vector<std::byte> encode_frame_header(const FrameHeader& h) {
    std::vector<std::byte> out(frame_header_size(h.dims.size()));
    std::size_t pos = 0;
    auto put = [&](const auto& v) {
        std::memcpy(out.data() + pos, &v, sizeof(v));
        pos += sizeof(v);
    };
    put(kFrameMagic);
    put(h.sequence);
    put(static_cast<std::uint8_t>(h.kind));
    put(static_cast<std::uint8_t>(h.dtype));
    put(static_cast<std::uint8_t>(h.dims.size()));
    for (auto d : h.dims) put(d);
    put(h.payload_bytes);
    const auto crc = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(pos)));
    put(crc);
    return out;
}

FrameHeader decode_frame_header(std::span<const std::byte> bytes, std::size_t* consumed) {
    std::size_t pos = 0;
    auto get = [&](auto& v) {
        if (pos + sizeof(v) > bytes.size()) throw CorruptionError("frame header truncated");
        std::memcpy(&v, bytes.data() + pos, sizeof(v));
        pos += sizeof(v);
    };
    std::uint32_t magic = 0;
    get(magic);
    if (magic != kFrameMagic) throw CorruptionError("bad frame magic");
    FrameHeader h;
    std::uint8_t kind = 0, dtype = 0, rank = 0;
    get(h.sequence);
    get(kind);
    get(dtype);
    get(rank);
    if (rank > 4) throw CorruptionError("frame rank " + std::to_string(rank) + " out of range");
    h.dims.resize(rank);
    for (auto& d : h.dims) get(d);
    get(h.payload_bytes);
    const std::size_t crc_end = pos;
    std::uint32_t crc = 0;
    get(crc);
    const auto expect = static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(crc_end)));
    if (crc != expect) throw CorruptionError("frame header checksum mismatch");
    if (kind > 3) throw CorruptionError("unknown payload kind " + std::to_string(kind));
    if (dtype > 3) throw CorruptionError("unknown frame dtype " + std::to_string(dtype));
    h.kind = static_cast<PayloadKind>(kind);
    h.dtype = static_cast<WireType>(dtype);
    std::uint64_t n = wire_size(h.dtype);
    for (auto d : h.dims) n *= d;
    if (n != h.payload_bytes) throw CorruptionError("payload_bytes does not match dims");
    if (consumed) *consumed = pos;
    return h;
}

FrameHeader tensor_frame_header(PayloadKind kind, const Tensor& t) {
    FrameHeader h;
    h.kind = kind;
    h.dtype = wire_type(t.dtype());
    for (auto d : t.shape()) h.dims.push_back(static_cast<std::uint32_t>(d));
    h.payload_bytes = t.numel() * sizeof(float);
    return h;
}

Tensor Frame::tensor() const {
    if (header.dtype != WireType::F32 && header.dtype != WireType::BF16E)
        throw ContractError("frame does not carry a float tensor");
    Shape shape(header.dims.begin(), header.dims.end());
    std::vector<float> data(payload.size() / sizeof(float));
    std::memcpy(data.data(), payload.data(), payload.size());
    return Tensor(std::move(shape), std::move(data), header.dtype == WireType::BF16E ? DType::BF16E : DType::F32);
}

std::vector<std::int32_t> Frame::ints() const {
    if (header.dtype != WireType::I32) throw ContractError("frame does not carry i32 values");
    std::vector<std::int32_t> out(payload.size() / sizeof(std::int32_t));
    std::memcpy(out.data(), payload.data(), payload.size());
    return out;
}

namespace detail {

struct ConsumerState {
    SegmentHeader* hdr = nullptr;
    std::byte* ring = nullptr;
    std::size_t cap = 0;
    ChannelLimits limits;

    std::uint64_t consume = 0;
    std::optional<std::uint64_t> last_seq;

    struct Entry {
        std::uint64_t end;
        bool released;
    };
    std::deque<Entry> entries;
    std::uint64_t first_entry_id = 0;
    std::size_t outstanding_views = 0;
    std::atomic<std::uint64_t> bytes_copied{0};

    std::uint64_t push_entry(std::uint64_t end, bool released) {
        entries.push_back(Entry{end, released});
        return first_entry_id + entries.size() - 1;
    }

    void release(std::uint64_t id) {
        auto& e = entries.at(id - first_entry_id);
        if (e.released) return;
        e.released = true;
        --outstanding_views;
        advance_read();
    }

    void advance_read() {
        bool moved = false;
        std::uint64_t end = 0;
        while (!entries.empty() && entries.front().released) {
            end = entries.front().end;
            entries.pop_front();
            ++first_entry_id;
            moved = true;
        }
        if (moved) hdr->read.store(end, std::memory_order_release);
    }
};

}  // namespace detail

struct Channel::Impl {
    std::string name;
    Backing backing = Backing::InProcess;
    Role role = Role::Producer;

    std::shared_ptr<HeapSegment> heap;
    void* map_base = nullptr;
    std::size_t map_size = 0;

    SegmentHeader* hdr = nullptr;
    std::byte* ring = nullptr;
    std::size_t cap = 0;

    // producer side
    std::uint64_t wpos = 0;
    std::optional<std::uint64_t> last_sent;

    std::unique_ptr<detail::ConsumerState> consumer;
    bool detached = false;

    ~Impl() { detach(true); }

    void detach(bool clean) noexcept {
        if (detached) return;
        detached = true;
        if (clean && hdr) {
            if (role == Role::Consumer) hdr->consumer_active.store(0, std::memory_order_release);
            if (role == Role::Producer) hdr->producer_active.store(0, std::memory_order_release);
        }
        if (backing == Backing::SharedMemory) {
            // Only a producer that mapped the segment owns the name; a create that
            // failed on a collision must not unlink someone else's segment.
            if (clean && role == Role::Producer && map_base) ::shm_unlink(shm_path(name).c_str());
            if (map_base) ::munmap(map_base, map_size);
        } else if (clean && role == Role::Producer) {
            std::lock_guard lock(registry_mutex());
            auto it = registry().find(name);
            if (it != registry().end() && it->second.lock() == heap) registry().erase(it);
        }
        if (!clean && backing == Backing::InProcess) {
            // A crashed in-process peer keeps the memory alive for the survivor.
            new std::shared_ptr<HeapSegment>(heap);
        }
        heap.reset();
        map_base = nullptr;
        hdr = nullptr;
    }

    void check_poison() const {
        if (hdr->poisoned.load(std::memory_order_acquire))
            throw PoisonedError("channel '" + name + "' is poisoned");
    }

    [[noreturn]] void poison(const std::string& why) {
        hdr->poisoned.store(1, std::memory_order_release);
        throw CorruptionError("channel '" + name + "': " + why);
    }
};

Channel::Channel(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Channel::Channel(Channel&&) noexcept = default;
Channel& Channel::operator=(Channel&&) noexcept = default;
Channel::~Channel() = default;

std::size_t Channel::record_size(std::size_t rank, std::size_t payload_bytes) noexcept {
    const std::size_t hs = frame_header_size(rank);
    const std::size_t frame_offset = align_up(kEnvelopeBytes + hs, kRecordAlign) - hs;
    return align_up(frame_offset + hs + payload_bytes, kRecordAlign);
}

Channel Channel::create(const std::string& name, std::size_t capacity, Backing backing) {
    if (capacity < kMinChannelCapacity || (capacity & (capacity - 1)) != 0)
        throw ParameterError("channel capacity must be a power of two >= 1 MiB, got " + std::to_string(capacity));
    auto impl = std::make_unique<Impl>();
    impl->name = name;
    impl->backing = backing;
    impl->role = Role::Producer;
    const std::size_t total = sizeof(SegmentHeader) + capacity;
    void* base = nullptr;
    if (backing == Backing::InProcess) {
        std::lock_guard lock(registry_mutex());
        auto& slot = registry()[name];
        if (!slot.expired()) throw NameCollisionError("channel '" + name + "' already exists");
        impl->heap = std::make_shared<HeapSegment>(total);
        slot = impl->heap;
        base = impl->heap->mem;
    } else {
        const std::string path = shm_path(name);
        int fd = ::shm_open(path.c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
        if (fd < 0) {
            if (errno == EEXIST) throw NameCollisionError("channel '" + name + "' already exists");
            throw MappingError("shm_open('" + path + "') failed: " + std::strerror(errno));
        }
        if (::ftruncate(fd, static_cast<off_t>(total)) != 0) {
            const int err = errno;
            ::close(fd);
            ::shm_unlink(path.c_str());
            throw MappingError("ftruncate('" + path + "') failed: " + std::strerror(err));
        }
        base = ::mmap(nullptr, total, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
        const int err = errno;
        ::close(fd);
        if (base == MAP_FAILED) {
            ::shm_unlink(path.c_str());
            throw MappingError("mmap('" + path + "') failed: " + std::strerror(err));
        }
        impl->map_base = base;
        impl->map_size = total;
    }
    auto* hdr = new (base) SegmentHeader{};
    hdr->capacity = capacity;
    hdr->write.store(0, std::memory_order_relaxed);
    hdr->read.store(0, std::memory_order_relaxed);
    hdr->poisoned.store(0, std::memory_order_relaxed);
    hdr->consumer_active.store(0, std::memory_order_relaxed);
    hdr->producer_active.store(1, std::memory_order_relaxed);
    hdr->magic.store(kSegmentMagic, std::memory_order_release);
    impl->hdr = hdr;
    impl->ring = static_cast<std::byte*>(base) + sizeof(SegmentHeader);
    impl->cap = capacity;
    return Channel(std::move(impl));
}

Channel Channel::attach(const std::string& name, Backing backing, ChannelLimits limits) {
    auto impl = std::make_unique<Impl>();
    impl->name = name;
    impl->backing = backing;
    impl->role = Role::Consumer;
    void* base = nullptr;
    if (backing == Backing::InProcess) {
        std::lock_guard lock(registry_mutex());
        auto it = registry().find(name);
        if (it == registry().end() || !(impl->heap = it->second.lock()))
            throw NotFoundError("channel '" + name + "' does not exist");
        base = impl->heap->mem;
    } else {
        const std::string path = shm_path(name);
        int fd = ::shm_open(path.c_str(), O_RDWR, 0600);
        if (fd < 0) {
            if (errno == ENOENT) throw NotFoundError("channel '" + name + "' does not exist");
            throw MappingError("shm_open('" + path + "') failed: " + std::strerror(errno));
        }
        struct stat st {};
        if (::fstat(fd, &st) != 0 || static_cast<std::size_t>(st.st_size) < sizeof(SegmentHeader) + kMinChannelCapacity) {
            ::close(fd);
            throw MappingError("channel '" + name + "' segment is not initialized");
        }
        const auto total = static_cast<std::size_t>(st.st_size);
        base = ::mmap(nullptr, total, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
        const int err = errno;
        ::close(fd);
        if (base == MAP_FAILED) throw MappingError("mmap of channel '" + name + "' failed: " + std::strerror(err));
        impl->map_base = base;
        impl->map_size = total;
    }
    auto* hdr = static_cast<SegmentHeader*>(base);
    impl->hdr = hdr;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(1);
    if (!wait_for([&] { return hdr->magic.load(std::memory_order_acquire) == kSegmentMagic; }, [] {}, deadline))
        throw MappingError("channel '" + name + "' segment has a bad magic");
    impl->ring = static_cast<std::byte*>(base) + sizeof(SegmentHeader);
    impl->cap = hdr->capacity;

    std::uint32_t expected = 0;
    if (!hdr->consumer_active.compare_exchange_strong(expected, 1, std::memory_order_acq_rel)) {
        // The previous consumer never detached: whatever it held is suspect.
        hdr->poisoned.store(1, std::memory_order_release);
        impl->detached = true;
        if (backing == Backing::SharedMemory) ::munmap(impl->map_base, impl->map_size);
        throw PoisonedError("channel '" + name + "' had a consumer that did not detach; channel poisoned");
    }

    auto cs = std::make_unique<detail::ConsumerState>();
    cs->hdr = hdr;
    cs->ring = impl->ring;
    cs->cap = impl->cap;
    cs->limits = limits;
    cs->consume = hdr->read.load(std::memory_order_acquire);
    impl->consumer = std::move(cs);
    return Channel(std::move(impl));
}

Channel Channel::attach_wait(const std::string& name, Backing backing, std::chrono::milliseconds timeout,
                             ChannelLimits limits) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        try {
            return attach(name, backing, limits);
        } catch (const NotFoundError&) {
            if (std::chrono::steady_clock::now() >= deadline) throw;
        } catch (const MappingError&) {
            if (std::chrono::steady_clock::now() >= deadline) throw;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
}

std::uint64_t Channel::send(PayloadKind kind, WireType dtype, std::vector<std::uint32_t> dims,
                            std::span<const std::byte> payload, SendOptions options) {
    auto& im = *impl_;
    if (im.role != Role::Producer) throw ContractError("send() on the consumer end of '" + im.name + "'");
    if (dims.empty() || dims.size() > 4) throw ContractError("frame rank must be 1..4");
    for (auto d : dims)
        if (d == 0) throw ContractError("frame dims must be nonzero");
    im.check_poison();
    std::uint64_t expect = wire_size(dtype);
    for (auto d : dims) expect *= d;
    if (expect != payload.size())
        throw ContractError("payload of " + std::to_string(payload.size()) + " bytes does not match dims (" +
                            std::to_string(expect) + " bytes)");
    const std::size_t rec = record_size(dims.size(), payload.size());
    if (rec > im.cap)
        throw OversizeError("frame needs " + std::to_string(rec) + " bytes, channel capacity is " +
                            std::to_string(im.cap));

    std::uint64_t seq = im.last_sent ? *im.last_sent + 1 : 1;
    if (options.sequence) {
        if (im.last_sent && *options.sequence <= *im.last_sent)
            throw ContractError("sequence " + std::to_string(*options.sequence) + " does not exceed previous " +
                                std::to_string(*im.last_sent));
        seq = *options.sequence;
    }
    FrameHeader header{seq, kind, dtype, std::move(dims), payload.size()};
    const auto hbytes = encode_frame_header(header);

    std::optional<std::chrono::steady_clock::time_point> deadline;
    if (options.timeout) deadline = std::chrono::steady_clock::now() + *options.timeout;
    auto wait_space = [&](std::size_t need) {
        bool ok = wait_for(
            [&] { return im.cap - (im.wpos - im.hdr->read.load(std::memory_order_acquire)) >= need; },
            [&] { im.check_poison(); }, deadline);
        if (!ok) throw TimeoutError("send on '" + im.name + "' timed out waiting for space");
    };

    const std::size_t mask = im.cap - 1;
    std::size_t off = im.wpos & mask;
    const std::size_t tail = im.cap - off;
    if (rec > tail) {
        wait_space(tail);
        Envelope pad{kTagPad, 0, tail};
        std::memcpy(im.ring + off, &pad, sizeof(pad));
        im.wpos += tail;
        im.hdr->write.store(im.wpos, std::memory_order_release);
        off = 0;
    }
    wait_space(rec);
    const std::size_t hs = hbytes.size();
    const std::size_t frame_offset = align_up(kEnvelopeBytes + hs, kRecordAlign) - hs;
    Envelope env{kTagFrame, static_cast<std::uint32_t>(frame_offset), rec};
    std::byte* base = im.ring + off;
    std::memcpy(base, &env, sizeof(env));
    std::memcpy(base + frame_offset, hbytes.data(), hs);
    if (!payload.empty()) std::memcpy(base + frame_offset + hs, payload.data(), payload.size());
    im.wpos += rec;
    im.hdr->write.store(im.wpos, std::memory_order_release);
    im.last_sent = seq;
    return seq;
}

std::uint64_t Channel::send_tensor(PayloadKind kind, const Tensor& t, SendOptions options) {
    std::vector<std::uint32_t> dims;
    for (auto d : t.shape()) dims.push_back(static_cast<std::uint32_t>(d));
    return send(kind, wire_type(t.dtype()), std::move(dims), std::as_bytes(t.data()), options);
}

namespace {

struct Parsed {
    FrameHeader header;
    std::span<const std::byte> payload;
    std::uint64_t record_end;
};

}  // namespace

// Shared by recv and recv_view: waits for the next frame record (skipping
// pads) and validates it, without consuming it.
static std::optional<Parsed> next_frame(Channel::Impl& im, std::chrono::milliseconds timeout) {
    auto& cs = *im.consumer;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    const std::size_t mask = im.cap - 1;
    for (;;) {
        im.check_poison();
        std::uint64_t w = 0;
        bool ok = wait_for([&] { return (w = im.hdr->write.load(std::memory_order_acquire)) != cs.consume; },
                           [&] { im.check_poison(); }, deadline);
        if (!ok) return std::nullopt;
        const std::size_t off = cs.consume & mask;
        Envelope env{};
        std::memcpy(&env, im.ring + off, sizeof(env));
        const std::uint64_t avail = w - cs.consume;
        if (env.record_bytes == 0 || env.record_bytes % kRecordAlign != 0 || env.record_bytes > avail ||
            off + env.record_bytes > im.cap)
            im.poison("malformed record envelope at cursor " + std::to_string(cs.consume));
        if (env.tag == kTagPad) {
            cs.push_entry(cs.consume + env.record_bytes, true);
            cs.consume += env.record_bytes;
            cs.advance_read();
            continue;
        }
        if (env.tag != kTagFrame) im.poison("unknown record tag at cursor " + std::to_string(cs.consume));
        std::span<const std::byte> rec(im.ring + off, env.record_bytes);
        if (env.frame_offset >= rec.size()) im.poison("frame offset outside record");
        std::size_t hs = 0;
        FrameHeader header;
        try {
            header = decode_frame_header(rec.subspan(env.frame_offset), &hs);
        } catch (const CorruptionError& e) {
            im.poison(e.what());
        }
        if (env.frame_offset + hs + header.payload_bytes > rec.size()) im.poison("payload overruns its record");
        if (cs.last_seq && header.sequence <= *cs.last_seq)
            im.poison("sequence " + std::to_string(header.sequence) + " after " + std::to_string(*cs.last_seq));
        auto payload = rec.subspan(env.frame_offset + hs, header.payload_bytes);
        return Parsed{std::move(header), payload, cs.consume + env.record_bytes};
    }
}

std::optional<Frame> Channel::recv(std::chrono::milliseconds timeout) {
    auto& im = *impl_;
    if (im.role != Role::Consumer) throw ContractError("recv() on the producer end of '" + im.name + "'");
    auto parsed = next_frame(im, timeout);
    if (!parsed) return std::nullopt;
    auto& cs = *im.consumer;
    Frame f;
    f.header = std::move(parsed->header);
    f.payload.assign(parsed->payload.begin(), parsed->payload.end());
    cs.bytes_copied.fetch_add(f.payload.size(), std::memory_order_relaxed);
    cs.last_seq = f.header.sequence;
    cs.push_entry(parsed->record_end, true);
    cs.consume = parsed->record_end;
    cs.advance_read();
    return f;
}

std::optional<FrameView> Channel::recv_view(std::chrono::milliseconds timeout) {
    auto& im = *impl_;
    if (im.role != Role::Consumer) throw ContractError("recv_view() on the producer end of '" + im.name + "'");
    auto& cs = *im.consumer;
    if (cs.outstanding_views >= cs.limits.max_views)
        throw ViewLimitError("channel '" + im.name + "' already has " + std::to_string(cs.outstanding_views) +
                             " outstanding views");
    auto parsed = next_frame(im, timeout);
    if (!parsed) return std::nullopt;
    // Pinning more than half the ring could leave the producer unable to place
    // a frame of similar size while the consumer waits on it.
    const std::uint64_t pinned = parsed->record_end - im.hdr->read.load(std::memory_order_relaxed);
    if (cs.outstanding_views > 0 && pinned > im.cap / 2)
        throw ViewLimitError("channel '" + im.name + "': outstanding views would pin " + std::to_string(pinned) +
                             " of " + std::to_string(im.cap) + " bytes");
    cs.last_seq = parsed->header.sequence;
    const auto id = cs.push_entry(parsed->record_end, false);
    ++cs.outstanding_views;
    cs.consume = parsed->record_end;
    return FrameView(&cs, id, std::move(parsed->header), parsed->payload);
}

std::uint64_t Channel::bytes_copied() const noexcept {
    return impl_->consumer ? impl_->consumer->bytes_copied.load(std::memory_order_relaxed) : 0;
}
std::uint64_t Channel::write_cursor() const noexcept { return impl_->hdr->write.load(std::memory_order_acquire); }
std::uint64_t Channel::read_cursor() const noexcept { return impl_->hdr->read.load(std::memory_order_acquire); }
std::size_t Channel::capacity() const noexcept { return impl_->cap; }
bool Channel::poisoned() const noexcept { return impl_->hdr->poisoned.load(std::memory_order_acquire) != 0; }
Channel::Role Channel::role() const noexcept { return impl_->role; }
const std::string& Channel::name() const noexcept { return impl_->name; }

void Channel::abandon() noexcept {
    if (impl_) impl_->detach(false);
}

FrameView::FrameView(FrameView&& other) noexcept
    : state_(std::exchange(other.state_, nullptr)),
      entry_(other.entry_),
      header_(std::move(other.header_)),
      payload_(other.payload_) {}

FrameView& FrameView::operator=(FrameView&& other) noexcept {
    if (this != &other) {
        release();
        state_ = std::exchange(other.state_, nullptr);
        entry_ = other.entry_;
        header_ = std::move(other.header_);
        payload_ = other.payload_;
    }
    return *this;
}

FrameView::~FrameView() { release(); }

void FrameView::release() {
    if (!state_) return;
    state_->release(entry_);
    state_ = nullptr;
}

std::span<const float> FrameView::floats() const {
    if (header_.dtype != WireType::F32 && header_.dtype != WireType::BF16E)
        throw ContractError("frame view does not carry floats");
    return {reinterpret_cast<const float*>(payload_.data()), payload_.size() / sizeof(float)};
}

std::string channel_name(const std::string& run_id, const std::string& src, const std::string& dst) {
    return "kdflow." + run_id + "." + src + "-" + dst;
}

std::uint64_t comm_volume(std::uint64_t batch, std::uint64_t seq, std::uint64_t dim, std::uint64_t bytes_per_elem) {
    if (batch == 0 || seq == 0 || dim == 0 || bytes_per_elem == 0)
        throw ParameterError("comm_volume arguments must be positive");
    std::uint64_t out = batch;
    for (auto f : {seq, dim, bytes_per_elem})
        if (__builtin_mul_overflow(out, f, &out)) throw OverflowError("comm_volume overflows 64 bits");
    return out;
}

}  // namespace kdflow
