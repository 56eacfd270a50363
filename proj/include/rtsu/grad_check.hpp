#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "rtsu/tensor.hpp"

namespace rtsu {

// Compares reverse-mode adjoints against central differences for a scalar
// closure. Above max_elems total elements, a seeded random subsample is
// checked instead. Returns the worst relative error.
//
// The closure must be a pure function of the leaf values (re-evaluated many
// times); anything with side effects (batchnorm running updates) must be
// frozen by the caller.
template <class Real>
double grad_check(const std::function<Tensor<Real>()>& fn, std::vector<Tensor<Real>> leaves,
                  double step = 1e-5, std::uint64_t subsample_seed = 1234,
                  std::int64_t max_elems = 10000) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    Tensor<Real> out = fn();
    out.backward();

    std::vector<std::vector<Real>> adjoints;
    adjoints.reserve(leaves.size());
    std::int64_t total = 0;
    for (auto& l : leaves) {
        adjoints.push_back(l.grad());
        total += l.size();
    }

    // element subset to probe
    std::vector<std::pair<std::size_t, std::int64_t>> picks;
    if (total <= max_elems) {
        for (std::size_t li = 0; li < leaves.size(); ++li)
            for (std::int64_t e = 0; e < leaves[li].size(); ++e) picks.push_back({li, e});
    } else {
        Rng rng(subsample_seed);
        for (std::int64_t i = 0; i < max_elems; ++i) {
            std::int64_t flat = rng.index(total);
            for (std::size_t li = 0; li < leaves.size(); ++li) {
                if (flat < leaves[li].size()) {
                    picks.push_back({li, flat});
                    break;
                }
                flat -= leaves[li].size();
            }
        }
    }

    double adj_scale = 0;
    for (const auto& a : adjoints)
        for (Real v : a) adj_scale = std::max(adj_scale, std::abs(double(v)));
    double denom_floor = 1e-6 * std::max(1.0, adj_scale);

    double worst = 0;
    for (auto [li, e] : picks) {
        auto& vals = leaves[li].values();
        Real saved = vals[std::size_t(e)];
        vals[std::size_t(e)] = saved + Real(step);
        double f_plus = double(fn().item());
        vals[std::size_t(e)] = saved - Real(step);
        double f_minus = double(fn().item());
        vals[std::size_t(e)] = saved;
        double numeric = (f_plus - f_minus) / (2 * step);
        double analytic = double(adjoints[li][std::size_t(e)]);
        double rel = std::abs(analytic - numeric) /
                     std::max({std::abs(analytic), std::abs(numeric), denom_floor});
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace rtsu
