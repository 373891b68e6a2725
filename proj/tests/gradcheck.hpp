#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <lrq/lrq.hpp>

// Central finite-difference certification of reverse-mode gradients, double
// precision. Framework-free so both the unit tests and the acceptance runner
// can use it.

namespace lrqtest {

struct GradCheckResult {
    int checked = 0;
    int failures = 0;
    double worst_rel = 0;  // worst |fd - analytic| / max(|fd|, |analytic|, floor)
    std::string detail;    // first failure

    bool ok() const { return checked > 0 && failures == 0; }
};

/// Checks d(loss)/d(p) for every element of every tensor in params against a
/// central difference of make_loss. make_loss must be a pure function of the
/// current parameter values and return a scalar tensor built from `params`.
template <typename MakeLoss>
GradCheckResult check_gradients(std::vector<lrq::DTensor> params, MakeLoss&& make_loss,
                                double tol = 1e-4, double h = 1e-5, double abs_tol = 1e-7) {
    GradCheckResult r;
    for (auto& p : params) p.set_requires_grad(true);

    auto loss = make_loss();
    if (loss.numel() != 1) {
        r.failures = 1;
        r.detail = "loss is not scalar";
        return r;
    }
    for (auto& p : params) p.zero_grad();
    lrq::backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& p : params)
        analytic.push_back(p.has_grad() ? p.grad()
                                        : std::vector<double>(p.values().size(), 0.0));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = static_cast<double>(make_loss().item());
            vals[i] = orig - h;
            const double fm = static_cast<double>(make_loss().item());
            vals[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(fd), std::abs(a), 1e-12});
            const double rel = std::abs(fd - a) / denom;
            ++r.checked;
            if (std::abs(fd - a) > tol * std::max(std::abs(fd), std::abs(a)) + abs_tol) {
                ++r.failures;
                if (r.detail.empty()) {
                    std::ostringstream os;
                    os << "param " << pi << " elem " << i << ": analytic " << a << " vs fd "
                       << fd << " (rel " << rel << ")";
                    r.detail = os.str();
                }
            }
            r.worst_rel = std::max(r.worst_rel, rel);
        }
    }
    return r;
}

inline lrq::DTensor make_randn(const lrq::Shape& shape, lrq::RandomEngine& rng,
                               double stddev = 1.0) {
    return lrq::DTensor::randn(shape, rng, stddev);
}

/// Random values kept away from |x| < margin (relu / clamp kinks break finite
/// differences right at the boundary).
inline lrq::DTensor make_randn_kink_free(const lrq::Shape& shape, lrq::RandomEngine& rng,
                                         double margin = 0.02) {
    auto t = lrq::DTensor::randn(shape, rng);
    for (auto& v : t.values())
        if (std::abs(v) < margin) v += (v < 0 ? -2 * margin : 2 * margin);
    return t;
}

}  // namespace lrqtest
