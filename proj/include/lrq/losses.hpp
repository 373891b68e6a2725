#pragma once

#include <numbers>

#include "lrq/model.hpp"
#include "lrq/ops.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// batch-statistics matching
//
// Sum over BN layers of squared-L2 distances between the batch statistics
// captured on the synthetic batch and the frozen pretraining statistics.
// Differentiable with respect to the synthetic batch through the capture.

template <typename T>
TensorT<T> bns_loss(const ForwardCaptureT<T>& capture, const std::vector<BNStatsT<T>>& target) {
    if (capture.bn_mean.size() != target.size() || capture.bn_sigma.size() != target.size())
        throw ConfigError("statistics layer count mismatch: capture has " +
                          std::to_string(capture.bn_mean.size()) + ", target has " +
                          std::to_string(target.size()));
    auto total = TensorT<T>::scalar(T(0));
    for (size_t k = 0; k < target.size(); ++k) {
        const int64_t c = static_cast<int64_t>(target[k].mean.size());
        if (capture.bn_mean[k].numel() != c || capture.bn_sigma[k].numel() != c)
            throw ConfigError("statistics channel width mismatch at layer " + std::to_string(k));
        auto mu_p = TensorT<T>::from_data({c}, target[k].mean);
        auto sg_p = TensorT<T>::from_data({c}, target[k].sigma);
        auto dmu = sub(capture.bn_mean[k], mu_p);
        auto dsg = sub(capture.bn_sigma[k], sg_p);
        total = add(total, add(sum(mul(dmu, dmu)), sum(mul(dsg, dsg))));
    }
    return total;
}

// ---------------------------------------------------------------------------
// adversarial margin: hinge corridor on cos(theta + m)
//
// theta is the angle between each sample's feature vector and its class
// center. The loss pushes cos(theta + m) into [lambda_lower, lambda_upper]
// and is zero inside that corridor.

template <typename T>
struct AMAConfigT {
    T margin = T(0.6);  // radians
    T lambda_lower = T(0.75);
    T lambda_upper = T(0.95);

    void validate() const {
        if (margin < T(0)) throw ConfigError("angular margin must be >= 0");
        if (!(T(-1) <= lambda_lower && lambda_lower < lambda_upper && lambda_upper <= T(1)))
            throw ConfigError("cosine bounds must satisfy -1 <= lower < upper <= 1");
    }
};

using AMAConfig = AMAConfigT<float>;

template <typename T>
TensorT<T> ama_loss(const TensorT<T>& features, const ClassCenters<T>& centers,
                    const std::vector<int>& labels, const AMAConfigT<T>& cfg) {
    cfg.validate();
    if (features.ndim() != 2) throw ShapeError("ama_loss expects [B,D] features");
    if (static_cast<int64_t>(labels.size()) != features.dim(0))
        throw ShapeError("ama_loss: label count mismatch");

    std::vector<int> rows(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= static_cast<int>(centers.row_of_class.size()) ||
            centers.row_of_class[labels[i]] < 0)
            throw ConfigError("no center for class " + std::to_string(labels[i]));
        rows[i] = centers.row_of_class[labels[i]];
    }
    auto per_sample_center = gather_rows(centers.centers, rows);  // [B,D]

    const T norm_eps = T(1e-24);  // zero-norm guard; cos collapses to 0, never NaN
    auto dot = row_sum(mul(features, per_sample_center));
    auto fn = sqrt_op(add_scalar(row_sum(mul(features, features)), norm_eps));
    auto cn = sqrt_op(add_scalar(row_sum(mul(per_sample_center, per_sample_center)), norm_eps));
    auto cos_theta = div(dot, mul(fn, cn));

    const T cos_cap = T(1) - T(1e-7);  // keep acos' finite
    auto theta = acos_op(clamp(cos_theta, -cos_cap, cos_cap));
    auto shifted =
        clamp(add_scalar(theta, cfg.margin), T(0), static_cast<T>(std::numbers::pi));
    auto cos_shifted = cos_op(shifted);

    auto lower_hinge = relu(add_scalar(mul_scalar(cos_shifted, T(-1)), cfg.lambda_lower));
    auto upper_hinge = relu(add_scalar(cos_shifted, -cfg.lambda_upper));
    return mean(add(lower_hinge, upper_hinge));
}

/// EMA class centers for configurations where a batch may miss classes.
/// Centers are targets, not trained: updates are detached from the graph.
template <typename T>
class CenterBank {
public:
    CenterBank(int num_classes, int64_t dim, T decay = T(0.9))
        : num_classes_(num_classes), dim_(dim), decay_(decay),
          centers_(static_cast<size_t>(num_classes) * dim, T(0)), seen_(num_classes, false) {
        if (decay < T(0) || decay >= T(1)) throw ConfigError("center decay must be in [0,1)");
    }

    void update(const TensorT<T>& features, const std::vector<int>& labels) {
        NoGradGuard guard;
        auto batch = class_centers(features.detach(), labels, num_classes_);
        for (size_t r = 0; r < batch.class_ids.size(); ++r) {
            const int cls = batch.class_ids[r];
            const T* src = batch.centers.values().data() + static_cast<int64_t>(r) * dim_;
            T* dst = centers_.data() + static_cast<int64_t>(cls) * dim_;
            if (!seen_[cls]) {
                std::copy_n(src, dim_, dst);
                seen_[cls] = true;
            } else {
                for (int64_t j = 0; j < dim_; ++j)
                    dst[j] = decay_ * dst[j] + (T(1) - decay_) * src[j];
            }
        }
    }

    bool has(int cls) const { return cls >= 0 && cls < num_classes_ && seen_[cls]; }

    /// Constant-center view covering the classes present in `labels`.
    ClassCenters<T> snapshot(const std::vector<int>& labels) const {
        ClassCenters<T> out;
        out.row_of_class.assign(num_classes_, -1);
        for (int y : labels) {
            if (!has(y)) throw ConfigError("no accumulated center for class " + std::to_string(y));
            if (out.row_of_class[y] < 0) {
                out.row_of_class[y] = static_cast<int>(out.class_ids.size());
                out.class_ids.push_back(y);
                out.counts.push_back(1);
            }
        }
        std::vector<T> data(out.class_ids.size() * static_cast<size_t>(dim_));
        for (size_t r = 0; r < out.class_ids.size(); ++r)
            std::copy_n(centers_.data() + static_cast<int64_t>(out.class_ids[r]) * dim_, dim_,
                        data.data() + static_cast<int64_t>(r) * dim_);
        out.centers = TensorT<T>::from_data({static_cast<int64_t>(out.class_ids.size()), dim_},
                                            std::move(data));
        return out;
    }

private:
    int num_classes_;
    int64_t dim_;
    T decay_;
    std::vector<T> centers_;
    std::vector<bool> seen_;
};

// ---------------------------------------------------------------------------
// decoupled distillation
//
// Classic temperature-T KL distillation splits exactly into a target/non-
// target binary term (TCKD) and a renormalized non-target term (NCKD):
//   KL(p_t || p_s) = TCKD + (1 - p_t[y]) * NCKD
// The two terms are reweighted independently. Teacher-side quantities are
// constants; gradients reach the student logits only. Everything is scaled
// by T^2 so magnitudes are comparable across temperatures.

template <typename T>
struct DKDConfigT {
    T alpha = T(1);
    T beta = T(8);
    T temperature = T(1);

    void validate() const {
        if (alpha < T(0) || beta < T(0)) throw ConfigError("distillation weights must be >= 0");
        if (!(temperature > T(0))) throw ConfigError("distillation temperature must be > 0");
    }
};

using DKDConfig = DKDConfigT<float>;

template <typename T>
struct DKDPerSampleT {
    TensorT<T> tckd;  // [B], T^2-scaled binary KL
    TensorT<T> nckd;  // [B], T^2-scaled renormalized non-target KL
    std::vector<T> teacher_target_prob;  // p_t[y] per sample (constants)
};

template <typename T>
DKDPerSampleT<T> dkd_per_sample(const TensorT<T>& student_logits,
                                const TensorT<T>& teacher_logits,
                                const std::vector<int>& labels, const DKDConfigT<T>& cfg) {
    cfg.validate();
    detail::check_same_shape(student_logits, teacher_logits, "dkd");
    if (student_logits.ndim() != 2) throw ShapeError("dkd expects [B,K] logits");
    const int64_t bsz = student_logits.dim(0), k = student_logits.dim(1);
    if (k < 2) throw ConfigError("distillation needs >= 2 classes");
    if (static_cast<int64_t>(labels.size()) != bsz) throw ShapeError("dkd: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= k) throw ConfigError("dkd: label out of range");

    const T temp = cfg.temperature;
    const T t2 = temp * temp;
    const T tiny = T(1e-12);

    // teacher probabilities (plain arithmetic; everything here is constant)
    std::vector<T> pt(static_cast<size_t>(bsz * k));
    {
        const auto& tv = teacher_logits.values();
        for (int64_t i = 0; i < bsz; ++i) {
            T mx = tv[i * k] / temp;
            for (int64_t j = 1; j < k; ++j) mx = std::max(mx, tv[i * k + j] / temp);
            T denom = T(0);
            for (int64_t j = 0; j < k; ++j) {
                pt[i * k + j] = std::exp(tv[i * k + j] / temp - mx);
                denom += pt[i * k + j];
            }
            for (int64_t j = 0; j < k; ++j) pt[i * k + j] /= denom;
        }
    }

    auto xlogx = [tiny](T x) { return x > tiny ? x * std::log(x) : T(0); };

    std::vector<T> pt_y(bsz), one_minus_pt_y(bsz);
    std::vector<T> tckd_const(bsz), nckd_const(bsz);
    std::vector<T> onehot(static_cast<size_t>(bsz * k), T(0));
    std::vector<T> pt_hat_mask(static_cast<size_t>(bsz * k), T(0));  // p̂_t, zero at target
    for (int64_t i = 0; i < bsz; ++i) {
        const int y = labels[i];
        const T py = pt[i * k + y];
        pt_y[i] = py;
        one_minus_pt_y[i] = T(1) - py;
        onehot[i * k + y] = T(1);
        tckd_const[i] = xlogx(py) + xlogx(T(1) - py);  // teacher binary entropy terms
        if (one_minus_pt_y[i] > tiny) {
            const T inv = T(1) / one_minus_pt_y[i];
            T acc = T(0);
            for (int64_t j = 0; j < k; ++j) {
                if (j == y) continue;
                const T ph = pt[i * k + j] * inv;
                pt_hat_mask[i * k + j] = ph;
                acc += xlogx(ph);
            }
            nckd_const[i] = acc;
        }
        // teacher fully confident: renormalized non-target distribution is
        // ill-defined; that sample contributes zero NCKD (its weight 1-p_t[y]
        // vanishes in the decomposition identity anyway)
    }

    // student side (differentiable)
    auto logps = log_softmax(mul_scalar(student_logits, T(1) / temp), 1);  // [B,K]
    auto logps_y = row_sum(mul(logps, TensorT<T>::from_data({bsz, k}, onehot)));
    auto ps_y = exp_op(logps_y);
    auto one_minus_ps = clamp(add_scalar(mul_scalar(ps_y, T(-1)), T(1)), tiny, T(1));
    auto log1m_ps = log_op(one_minus_ps);

    // TCKD_i = const_i - pt_y*log ps_y - (1-pt_y)*log(1-ps_y)
    auto tckd = add(TensorT<T>::from_data({bsz}, tckd_const),
                    mul_scalar(add(mul(logps_y, TensorT<T>::from_data({bsz}, pt_y)),
                                   mul(log1m_ps, TensorT<T>::from_data({bsz}, one_minus_pt_y))),
                               T(-1)));

    // NCKD_i = const_i - sum_{j != y} p̂t_ij log ps_ij + log(1-ps_y)
    auto nt = row_sum(mul(logps, TensorT<T>::from_data({bsz, k}, pt_hat_mask)));
    auto nckd = add(add(TensorT<T>::from_data({bsz}, nckd_const), mul_scalar(nt, T(-1))),
                    log1m_ps);
    // zero out fully-confident-teacher samples
    std::vector<T> nckd_mask(bsz, T(1));
    for (int64_t i = 0; i < bsz; ++i)
        if (one_minus_pt_y[i] <= tiny) nckd_mask[i] = T(0);
    nckd = mul(nckd, TensorT<T>::from_data({bsz}, nckd_mask));

    DKDPerSampleT<T> out;
    out.tckd = mul_scalar(tckd, t2);
    out.nckd = mul_scalar(nckd, t2);
    out.teacher_target_prob = std::move(pt_y);
    return out;
}

template <typename T>
struct DKDTermsT {
    TensorT<T> total;
    TensorT<T> tckd_mean;
    TensorT<T> nckd_mean;
};

template <typename T>
DKDTermsT<T> dkd_loss(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                      const std::vector<int>& labels, const DKDConfigT<T>& cfg) {
    auto per = dkd_per_sample(student_logits, teacher_logits, labels, cfg);
    DKDTermsT<T> out;
    out.tckd_mean = mean(per.tckd);
    out.nckd_mean = mean(per.nckd);
    out.total = add(mul_scalar(out.tckd_mean, cfg.alpha), mul_scalar(out.nckd_mean, cfg.beta));
    return out;
}

// ---------------------------------------------------------------------------
// cross-entropy and combined objectives

template <typename T>
TensorT<T> ce_loss(const TensorT<T>& logits, const std::vector<int>& labels) {
    return nll_from_logprobs(log_softmax(logits, 1), labels);
}

template <typename T>
struct GenerationLossTermsT {
    TensorT<T> total;
    TensorT<T> bns;  // undefined when disabled
    TensorT<T> ama;
};

/// Generation objective: unweighted sum of the statistics-matching and the
/// angular-margin terms. Either term can be toggled off for ablation arms.
template <typename T>
GenerationLossTermsT<T> generation_loss(const ForwardCaptureT<T>& capture,
                                        const std::vector<BNStatsT<T>>& target,
                                        const TensorT<T>& features,
                                        const ClassCenters<T>& centers,
                                        const std::vector<int>& labels,
                                        const AMAConfigT<T>& ama_cfg, bool use_bns,
                                        bool use_ama) {
    GenerationLossTermsT<T> out;
    out.total = TensorT<T>::scalar(T(0));
    if (use_bns) {
        out.bns = bns_loss(capture, target);
        out.total = add(out.total, out.bns);
    }
    if (use_ama) {
        out.ama = ama_loss(features, centers, labels, ama_cfg);
        out.total = add(out.total, out.ama);
    }
    return out;
}

template <typename T>
struct FinetuneLossTermsT {
    TensorT<T> total;
    TensorT<T> ce;
    TensorT<T> tckd;  // undefined when distillation disabled
    TensorT<T> nckd;
};

/// Fine-tuning objective: cross-entropy of the quantized model against the
/// conditioning labels plus lambda times the decoupled distillation loss
/// against the full-precision teacher.
template <typename T>
FinetuneLossTermsT<T> finetune_loss(const TensorT<T>& q_logits, const TensorT<T>& fp_logits,
                                    const std::vector<int>& labels, T lambda,
                                    const DKDConfigT<T>& dkd_cfg, bool use_dkd = true) {
    if (lambda < T(0)) throw ConfigError("distillation weight lambda must be >= 0");
    FinetuneLossTermsT<T> out;
    out.ce = ce_loss(q_logits, labels);
    out.total = out.ce;
    if (use_dkd && lambda > T(0)) {
        auto d = dkd_loss(q_logits, fp_logits, labels, dkd_cfg);
        out.tckd = d.tckd_mean;
        out.nckd = d.nckd_mean;
        out.total = add(out.total, mul_scalar(d.total, lambda));
    }
    return out;
}

}  // namespace lrq
