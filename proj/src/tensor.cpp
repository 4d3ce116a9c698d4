#include "kdflow/tensor.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

#include "kdflow/errors.hpp"
#include "kdflow/kernels.hpp"

namespace kdflow {

static_assert(std::endian::native == std::endian::little, "kdflow assumes a little-endian host");

const char* dtype_name(DType dtype) noexcept {
    switch (dtype) {
        case DType::F32: return "f32";
        case DType::BF16E: return "bf16e";
    }
    return "?";
}

DType parse_dtype(const std::string& name) {
    if (name == "f32" || name == "F32") return DType::F32;
    if (name == "bf16e" || name == "BF16E") return DType::BF16E;
    throw ParameterError("unknown dtype '" + name + "' (expected f32 or bf16e)");
}

float bf16_project(float x) noexcept {
    auto bits = std::bit_cast<std::uint32_t>(x);
    if (std::isnan(x)) return std::bit_cast<float>((bits & 0xFFFF0000u) | 0x00400000u);
    return std::bit_cast<float>(bits & 0xFFFF0000u);
}

void project(std::span<float> values, DType dtype) noexcept {
    if (dtype != DType::BF16E) return;
    for (float& v : values) v = bf16_project(v);
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4)
        throw ShapeError("tensor rank must be in 1..4, got shape " + shape_str(shape));
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor dims must be >= 1, got shape " + shape_str(shape));
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> data, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_))
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
    project(data_, dtype_);
}

Tensor Tensor::scalar(float value, DType dtype) { return Tensor({1}, {value}, dtype); }

Tensor Tensor::filled(Shape shape, float value, DType dtype) {
    Tensor t(std::move(shape), dtype);
    float v = dtype == DType::BF16E ? bf16_project(value) : value;
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size())
        throw ShapeError("index rank " + std::to_string(index.size()) + " for shape " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw ShapeError("index out of range for shape " + shape_str(shape_));
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

float Tensor::item() const {
    if (data_.size() != 1) throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_, dtype_);
}

Tensor Tensor::to(DType dtype) const {
    if (empty()) return {};
    return Tensor(shape_, data_, dtype);
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && dtype_ == other.dtype_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string("matmul dtype mismatch: ") + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
    Tensor out({a.dim(0), b.dim(1)}, a.dtype());
    kernels::matmul(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
    project(out.data(), out.dtype());
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    Tensor out({cols, rows}, a.dtype());
    auto src = a.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
    return out;
}

Tensor softmax(const Tensor& z, float temperature) {
    if (!(temperature > 0.0f)) throw ParameterError("softmax temperature must be > 0");
    for (float v : z.data())
        if (!std::isfinite(v)) throw NumericError("softmax input contains a non-finite value");
    Tensor out(z.shape(), z.dtype());
    const std::size_t v = z.shape().back();
    const std::size_t rows = z.numel() / v;
    for (std::size_t r = 0; r < rows; ++r)
        kernels::softmax_row(z.data().subspan(r * v, v), temperature, out.data().subspan(r * v, v));
    project(out.data(), out.dtype());
    return out;
}

namespace {

constexpr std::array<char, 4> kTensorMagic{'K', 'D', 'T', '1'};

template <typename T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T value{};
    if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError("truncated tensor record");
    return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kTensorMagic.data(), kTensorMagic.size());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw IoError("failed to write tensor");
}

Tensor read_tensor(std::istream& in) {
    std::array<char, 4> magic{};
    if (!in.read(magic.data(), magic.size())) throw FormatError("truncated tensor record");
    if (magic != kTensorMagic) throw FormatError("bad tensor magic");
    auto dtype_code = get<std::uint8_t>(in);
    if (dtype_code > 1) throw FormatError("unknown tensor dtype code " + std::to_string(dtype_code));
    auto rank = get<std::uint8_t>(in);
    if (rank == 0 || rank > 4) throw FormatError("bad tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint32_t>(in);
    std::vector<float> data(shape_numel(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float))))
        throw FormatError("truncated tensor payload");
    return Tensor(std::move(shape), std::move(data), static_cast<DType>(dtype_code));
}

std::uint32_t tensor_crc32(const Tensor& t) {
    auto bytes = std::as_bytes(t.data());
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace kdflow
