#pragma once

#include "radiance/autograd.hpp"
#include "radiance/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace radiance::check {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst;
};

/// Central-difference check of d loss / d p for every parameter entry in
/// `store` whose name starts with `prefix`. `loss` must rebuild the graph on
/// every call and be deterministic. Relative error uses max(|a|, |n|, floor).
inline GradCheckResult grad_check(nn::ParamStore& store, const std::function<ag::Var()>& loss, double step = 1e-4,
                                  const std::string& prefix = "", double floor = 1e-6, int max_entries_per_param = 12) {
    store.zero_grad();
    ag::Var l = loss();
    ag::backward(l);
    std::map<std::string, ag::Matrix> analytic;
    for (const auto& [name, v] : store.all()) {
        analytic[name] = v.grad().size() ? v.grad() : ag::Matrix::Zero(v.rows(), v.cols());
    }
    store.zero_grad();
    GradCheckResult res;
    for (const auto& [name, v] : store.all()) {
        if (name.rfind(prefix, 0) != 0) continue;
        const auto n = v.value().size();
        const auto stride = std::max<ag::Index>(1, n / max_entries_per_param);
        for (ag::Index k = 0; k < n; k += stride) {
            ag::Matrix& m = const_cast<ag::Var&>(v).mutable_value();
            const double orig = m.data()[k];
            m.data()[k] = orig + step;
            const double up = loss().item();
            m.data()[k] = orig - step;
            const double down = loss().item();
            m.data()[k] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[name].data()[k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst = name + "[" + std::to_string(k) + "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(numeric);
            }
        }
    }
    return res;
}

}  // namespace radiance::check
