#pragma once

// Central finite-difference gradient oracle. Independent of the autodiff
// path: it only calls the forward function, perturbing raw parameter data.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvdiff/tensor.hpp"

namespace fd {

struct FdReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::string worst;  // which tensor/element was worst
};

// f: forward pass returning a scalar; evaluated repeatedly while entries of
// `inputs` are perturbed in place. `analytic` are the autodiff gradients in
// the same order as `inputs`. Checks every element when a tensor has fewer
// than `max_probe` entries, otherwise a deterministic stride subset.
inline FdReport check_gradients(const std::function<double()>& f,
                                std::vector<mvdiff::Tensor> inputs,
                                const std::vector<mvdiff::Tensor>& analytic,
                                double step = 1e-5, int64_t max_probe = 64) {
    FdReport rep;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& t = inputs[ti];
        int64_t n = t.numel();
        int64_t stride = n <= max_probe ? 1 : n / max_probe;
        for (int64_t i = 0; i < n; i += stride) {
            double* d = t.mutable_data();
            double orig = d[i];
            d[i] = orig + step;
            double fp = f();
            d[i] = orig - step;
            double fm = f();
            d[i] = orig;
            double num = (fp - fm) / (2.0 * step);
            double ana = analytic[ti].data()[i];
            double abs_err = std::fabs(num - ana);
            double denom = std::max({std::fabs(num), std::fabs(ana), 1e-8});
            double rel = abs_err / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "tensor " + std::to_string(ti) + " elem " + std::to_string(i) +
                            " analytic=" + std::to_string(ana) + " numeric=" + std::to_string(num);
            }
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        }
    }
    return rep;
}

}  // namespace fd
