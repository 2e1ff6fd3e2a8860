#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ctf/error.hpp"
#include "ctf/rng.hpp"

namespace ctf {

// Dense row-major tensor. Data is shared and treated as immutable once an
// operation has produced it; `node` ties the tensor to a tape when recording.
template <typename S>
struct TensorT {
    std::vector<int64_t> shape;
    std::shared_ptr<std::vector<S>> data;
    bool requires_grad = false;
    int node = -1;

    TensorT() : data(std::make_shared<std::vector<S>>()) {}

    explicit TensorT(std::vector<int64_t> shp)
        : shape(std::move(shp)), data(std::make_shared<std::vector<S>>()) {
        data->assign(static_cast<size_t>(count(shape)), S(0));
    }

    TensorT(std::vector<int64_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::make_shared<std::vector<S>>(std::move(values))) {
        check(count(shape) == static_cast<int64_t>(data->size()), ErrKind::shape,
              "tensor data length does not match shape");
    }

    static int64_t count(const std::vector<int64_t>& shp) {
        int64_t n = 1;
        for (int64_t d : shp) {
            check(d > 0, ErrKind::shape, "tensor dimensions must be positive");
            n *= d;
        }
        return n;
    }

    static TensorT zeros(std::vector<int64_t> shp) { return TensorT(std::move(shp)); }

    static TensorT full(std::vector<int64_t> shp, S value) {
        TensorT t(std::move(shp));
        for (S& v : *t.data) v = value;
        return t;
    }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    // i.i.d. normal(0, stddev) fill
    static TensorT randn(std::vector<int64_t> shp, Rng& rng, S stddev = S(1)) {
        TensorT t(std::move(shp));
        for (S& v : *t.data) v = static_cast<S>(rng.normal()) * stddev;
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(data->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    S* ptr() { return data->data(); }
    const S* ptr() const { return data->data(); }

    S& operator[](int64_t i) { return (*data)[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return (*data)[static_cast<size_t>(i)]; }

    // 2-D accessors (rows x cols)
    int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
    int64_t cols() const {
        check(rank() == 2, ErrKind::shape, "cols() requires a rank-2 tensor");
        return shape[1];
    }
    S& at(int64_t r, int64_t c) { return (*data)[static_cast<size_t>(r * shape[1] + c)]; }
    const S& at(int64_t r, int64_t c) const {
        return (*data)[static_cast<size_t>(r * shape[1] + c)];
    }

    S item() const {
        check(numel() == 1, ErrKind::shape, "item() requires a single-element tensor");
        return (*data)[0];
    }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            os << shape[i] << (i + 1 < shape.size() ? "x" : "");
        }
        os << "]";
        return os.str();
    }
};

using Tensor = TensorT<float>;

template <typename S>
bool has_nonfinite(const TensorT<S>& t) {
    for (S v : *t.data) {
        if (!std::isfinite(static_cast<double>(v))) return true;
    }
    return false;
}

template <typename S>
bool bitwise_equal(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape != b.shape) return false;
    return std::memcmp(a.ptr(), b.ptr(), sizeof(S) * static_cast<size_t>(a.numel())) == 0;
}

}  // namespace ctf
