#pragma once

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "epg/core/rng.hpp"

namespace epg {

// Dense row-major double tensor. All heavy math lives in epg::kern; this type
// only owns storage and shape. Construction zero-fills; `uninit` skips the
// fill for buffers that are fully overwritten right away.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : Tensor(std::move(shape), true) {}

    Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

    static Tensor uninit(std::vector<int64_t> shape) { return Tensor(std::move(shape), false); }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t = uninit(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double std = 1.0) {
        Tensor t = uninit(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) t.data_[i] = std * rng.normal();
        return t;
    }

    Tensor(const Tensor& o) : shape_(o.shape_), numel_(o.numel_) {
        if (numel_ > 0) {
            data_ = std::make_unique<double[]>(static_cast<size_t>(numel_));
            std::memcpy(data_.get(), o.data_.get(), sizeof(double) * static_cast<size_t>(numel_));
        }
    }

    Tensor& operator=(const Tensor& o) {
        if (this == &o) return *this;
        if (numel_ != o.numel_) {
            data_ = o.numel_ > 0 ? std::make_unique<double[]>(static_cast<size_t>(o.numel_)) : nullptr;
        }
        shape_ = o.shape_;
        numel_ = o.numel_;
        if (numel_ > 0)
            std::memcpy(data_.get(), o.data_.get(), sizeof(double) * static_cast<size_t>(numel_));
        return *this;
    }

    Tensor(Tensor&&) noexcept = default;
    Tensor& operator=(Tensor&&) noexcept = default;

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(size_t i) const { return shape_.at(i); }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return numel_; }
    bool empty() const { return numel_ == 0; }

    double* data() { return data_.get(); }
    const double* data() const { return data_.get(); }

    double& operator[](int64_t i) { return data_[i]; }
    double operator[](int64_t i) const { return data_[i]; }

    void fill(double v) {
        for (int64_t i = 0; i < numel_; ++i) data_[i] = v;
    }
    void zero() {
        if (numel_ > 0) std::memset(data_.get(), 0, sizeof(double) * static_cast<size_t>(numel_));
    }

    // Reinterpret shape without touching data; element count must match.
    void reshape(std::vector<int64_t> shape) {
        if (count(shape) != numel_) throw std::invalid_argument("Tensor::reshape: numel mismatch");
        shape_ = std::move(shape);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    Tensor(std::vector<int64_t> shape, bool zero_fill) : shape_(std::move(shape)) {
        numel_ = count(shape_);
        if (numel_ > 0) {
            data_ = std::make_unique<double[]>(static_cast<size_t>(numel_));
            if (zero_fill) zero();
        }
    }

    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dim");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::unique_ptr<double[]> data_;
    int64_t numel_ = 0;
};

}  // namespace epg
