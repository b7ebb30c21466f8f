#pragma once

#include <cstdint>
#include <cstddef>
#include <iosfwd>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace nwlab {

std::string shape_to_string(const std::vector<int>& shape);

// Dense n-dimensional array. Canonical image layout is C x H x W with an
// optional leading batch extent; value type is float for training and double
// for tests/gradient checks.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(check_shape(shape_), T(0));
    }

    TensorT(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != static_cast<size_t>(check_shape(shape_)))
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_to_string(shape_));
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, T v) {
        TensorT t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }

    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // rank-3 (C,H,W) accessor
    T& at(int c, int h, int w) {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }
    const T& at(int c, int h, int w) const {
        return data_[(static_cast<size_t>(c) * shape_[1] + h) * shape_[2] + w];
    }

    void fill(T v) {
        for (auto& x : data_) x = v;
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

private:
    static int64_t check_shape(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int e : shape) {
            if (e < 1) throw std::invalid_argument("tensor extent must be >= 1, got shape " + shape_to_string(shape));
            n *= e;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

// --- NWT1 serialization -----------------------------------------------------
// little-endian blob: magic "NWT1", u8 dtype tag (1=f32, 2=f64), u8 rank,
// u32 extents, raw values.

template <typename T>
void write_tensor(std::ostream& os, const TensorT<T>& t);

template <typename T>
TensorT<T> read_tensor(std::istream& is);

// Named tensor manifest used for checkpoints: u32 record count, then per
// record a u16 name length, the name bytes and one NWT1 blob.
template <typename T>
void save_manifest(const std::string& path,
                   const std::vector<std::pair<std::string, const TensorT<T>*>>& entries);

template <typename T>
std::vector<std::pair<std::string, TensorT<T>>> load_manifest(const std::string& path);

} // namespace nwlab
