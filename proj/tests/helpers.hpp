#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ctf/autograd.hpp"
#include "ctf/rng.hpp"
#include "ctf/tensor.hpp"

namespace ctf_test {

// Central-difference gradient check. `build_loss` must rebuild the graph from
// the given leaves on a fresh tape each call, so perturbed forward passes see
// the modified values.
template <typename S>
struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

template <typename S>
FdReport<S> fd_check(std::vector<ctf::TensorT<S>*> leaves,
                     const std::function<ctf::TensorT<S>(ctf::TapeT<S>&)>& build_loss,
                     S epsilon) {
    ctf::TapeT<S> tape;
    for (auto* leaf : leaves) tape.watch(*leaf);
    ctf::TensorT<S> loss = build_loss(tape);
    tape.backward(loss);

    FdReport<S> report;
    for (auto* leaf : leaves) {
        auto analytic = tape.grad(*leaf);
        for (int64_t i = 0; i < leaf->numel(); ++i) {
            const S keep = (*leaf)[i];
            (*leaf)[i] = keep + epsilon;
            ctf::TapeT<S> t_plus(false);
            const double f_plus = static_cast<double>(build_loss(t_plus).item());
            (*leaf)[i] = keep - epsilon;
            ctf::TapeT<S> t_minus(false);
            const double f_minus = static_cast<double>(build_loss(t_minus).item());
            (*leaf)[i] = keep;

            const double fd = (f_plus - f_minus) / (2.0 * static_cast<double>(epsilon));
            const double an = static_cast<double>(analytic[static_cast<size_t>(i)]);
            const double abs_err = std::abs(fd - an);
            const double denom = std::max(1.0, std::max(std::abs(fd), std::abs(an)));
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            report.max_rel_err = std::max(report.max_rel_err, abs_err / denom);
        }
    }
    return report;
}

template <typename S>
ctf::TensorT<S> random_tensor(std::vector<int64_t> shape, ctf::Rng& rng, S scl = S(1)) {
    return ctf::TensorT<S>::randn(std::move(shape), rng, scl);
}

}  // namespace ctf_test
