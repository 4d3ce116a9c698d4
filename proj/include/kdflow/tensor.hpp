#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace kdflow {

/// Element precision. BF16E is bfloat16 emulated inside F32 storage: every
/// arithmetic store truncates the mantissa to bfloat16 width.
enum class DType : std::uint8_t { F32 = 0, BF16E = 1 };

const char* dtype_name(DType dtype) noexcept;
DType parse_dtype(const std::string& name);

/// Truncate an F32 value to the nearest-toward-zero bfloat16 value. NaN stays NaN.
float bf16_project(float x) noexcept;

/// Apply the store projection for `dtype` (no-op for F32).
void project(std::span<float> values, DType dtype) noexcept;

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor of rank 1..4.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, DType dtype = DType::F32);
    Tensor(Shape shape, std::vector<float> data, DType dtype = DType::F32);

    static Tensor scalar(float value, DType dtype = DType::F32);
    static Tensor filled(Shape shape, float value, DType dtype = DType::F32);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t numel() const noexcept { return data_.size(); }
    DType dtype() const noexcept { return dtype_; }
    bool empty() const noexcept { return data_.empty(); }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }
    const std::vector<float>& vec() const noexcept { return data_; }

    std::size_t offset(std::initializer_list<std::size_t> index) const;
    float at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }
    float& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
    float item() const;

    /// Same data, new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    /// Copy converted to `dtype` (projected when narrowing to BF16E).
    Tensor to(DType dtype) const;

    bool bitwise_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    DType dtype_ = DType::F32;
    std::vector<float> data_;
};

/// [M,K] x [K,N]. Each output element accumulates k = 0..K-1 left to right
/// in F32, starting from +0; BF16E projects the final store.
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D transpose.
Tensor transpose(const Tensor& a);

/// Softmax over the last dimension of z / temperature.
Tensor softmax(const Tensor& z, float temperature = 1.0f);

/// KDT1 serialization: magic, dtype u8, rank u8, u32 dims, F32 payload (little-endian).
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

/// CRC32 over the raw element bytes.
std::uint32_t tensor_crc32(const Tensor& t);

}  // namespace kdflow
