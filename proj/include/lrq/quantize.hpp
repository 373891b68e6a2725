#pragma once

#include <cmath>
#include <cstdint>

#include "lrq/ops.hpp"
#include "lrq/tensor.hpp"

namespace lrq {

// ---------------------------------------------------------------------------
// asymmetric uniform quantization
//
// Given a clipping range [alpha, beta] and N bits:
//   scale      S = (beta - alpha) / (2^N - 1)
//   zero point Z = round(alpha / S)            (kept signed; often negative)
//   code       q = clamp(round(x / S - Z), 0, 2^N - 1)
//   value      x_hat = (q + Z) * S
//
// The offset-corrected decode above makes round-trip error at most S/2 for
// any in-range input. scale_only_dequant drops the + Z term (x_hat = q * S),
// which shifts every decoded value by Z*S; it exists for comparison runs and
// is off by default.

enum class QuantGranularity { PerTensor, PerChannel };

inline const char* to_string(QuantGranularity g) {
    return g == QuantGranularity::PerTensor ? "per-tensor" : "per-channel";
}

template <typename T>
struct QuantParams {
    int bits = 8;
    T alpha = T(-1);
    T beta = T(1);
    T scale = T(0);
    int64_t zero_point = 0;
    bool scale_only_dequant = false;
    QuantGranularity granularity = QuantGranularity::PerTensor;

    int64_t levels() const { return (int64_t(1) << bits) - 1; }
};

inline void check_bits(int bits) {
    if (bits < 2 || bits > 8)
        throw ConfigError("quantizer bit-width must be in [2,8], got " + std::to_string(bits));
}

template <typename T>
QuantParams<T> make_quant_params(T alpha, T beta, int bits, bool scale_only_dequant = false) {
    check_bits(bits);
    if (!std::isfinite(static_cast<double>(alpha)) || !std::isfinite(static_cast<double>(beta)))
        throw NumericError("quantizer range is not finite");
    if (!(alpha < beta))
        throw ConfigError("quantizer range is degenerate: alpha=" + std::to_string(alpha) +
                          " beta=" + std::to_string(beta));

    QuantParams<T> p;
    p.bits = bits;
    p.alpha = alpha;
    p.beta = beta;
    p.scale = (beta - alpha) / static_cast<T>(p.levels());
    // alpha/scale computed from the unrounded ratio so half-points round the
    // same way regardless of T's precision
    p.zero_point = std::llround(static_cast<double>(alpha) * p.levels() /
                                (static_cast<double>(beta) - static_cast<double>(alpha)));
    p.scale_only_dequant = scale_only_dequant;
    return p;
}

/// Widen a (possibly empty) observed range just enough for a positive scale.
/// Used by calibration; make_quant_params itself rejects degenerate ranges.
template <typename T>
std::pair<T, T> expand_degenerate_range(T lo, T hi) {
    const T min_width = std::max(T(1e-8), std::max(std::abs(lo), std::abs(hi)) * T(1e-6));
    if (hi - lo < min_width) {
        const T mid = (lo + hi) / T(2);
        lo = mid - min_width / T(2);
        hi = mid + min_width / T(2);
    }
    return {lo, hi};
}

/// Integer code for one value. Rounding is half-away-from-zero (std::round).
/// Inputs far outside [alpha, beta] clamp to the end codes; never throws.
template <typename T>
int64_t quantize_value(T x, const QuantParams<T>& p) {
    const double q = std::round(static_cast<double>(x) / static_cast<double>(p.scale) -
                                static_cast<double>(p.zero_point));
    if (!(q > 0)) return 0;
    if (q >= static_cast<double>(p.levels())) return p.levels();
    return static_cast<int64_t>(q);
}

template <typename T>
T dequantize_value(int64_t code, const QuantParams<T>& p) {
    const int64_t base = p.scale_only_dequant ? code : code + p.zero_point;
    return static_cast<T>(base) * p.scale;
}

template <typename T>
T quantize_dequantize(T x, const QuantParams<T>& p) {
    return dequantize_value(quantize_value(x, p), p);
}

template <typename T>
std::vector<int32_t> quantize_codes(const std::vector<T>& x, const QuantParams<T>& p) {
    std::vector<int32_t> codes(x.size());
    for (size_t i = 0; i < x.size(); ++i)
        codes[i] = static_cast<int32_t>(quantize_value(x[i], p));
    return codes;
}

// ---------------------------------------------------------------------------
// fake quantization (quantize-dequantize with a straight-through gradient)
//
// Forward emits x_hat; backward passes the incoming gradient where the input
// lies inside the clipping range [alpha, beta] and blocks it outside.

template <typename T>
TensorT<T> fake_quantize(const TensorT<T>& x, const QuantParams<T>& p) {
    std::vector<T> out(x.values());
    for (auto& v : out) v = quantize_dequantize(v, p);
    const T lo = p.alpha, hi = p.beta;
    return detail::make_op<T>(x.shape(), std::move(out), {x.node()}, [lo, hi](NodeT<T>& self) {
        auto& parent = *self.parents[0];
        parent.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T v = parent.data[i];
            if (v >= lo && v <= hi) parent.grad[i] += self.grad[i];
        }
    });
}

/// Per-output-channel fake quantization of an OIHW weight tensor: row c of
/// the flattened weight uses params[c].
template <typename T>
TensorT<T> fake_quantize_per_channel(const TensorT<T>& w,
                                     const std::vector<QuantParams<T>>& params) {
    if (w.ndim() < 2) throw ShapeError("per-channel quantization expects >= 2-D weights");
    const int64_t channels = w.dim(0);
    if (static_cast<int64_t>(params.size()) != channels)
        throw ShapeError("per-channel quantization: params count != output channels");
    const int64_t per = w.numel() / channels;
    std::vector<T> out(w.values());
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t i = 0; i < per; ++i)
            out[c * per + i] = quantize_dequantize(out[c * per + i], params[c]);
    return detail::make_op<T>(w.shape(), std::move(out), {w.node()},
                              [params, per](NodeT<T>& self) {
                                  auto& parent = *self.parents[0];
                                  parent.ensure_grad();
                                  for (size_t c = 0; c < params.size(); ++c) {
                                      const T lo = params[c].alpha, hi = params[c].beta;
                                      for (int64_t i = 0; i < per; ++i) {
                                          const int64_t j = static_cast<int64_t>(c) * per + i;
                                          const T v = parent.data[j];
                                          if (v >= lo && v <= hi)
                                              parent.grad[j] += self.grad[j];
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// activation range tracking
//
// Exponential moving average of per-batch extrema. momentum is the fraction
// of the old estimate kept each step. After warmup_batches observations the
// tracker freezes itself; later calls to observe() are ignored.

template <typename T>
class RangeTracker {
public:
    explicit RangeTracker(T momentum = T(0.9), int warmup_batches = 20)
        : momentum_(momentum), warmup_batches_(warmup_batches) {
        if (momentum < T(0) || momentum >= T(1))
            throw ConfigError("range tracker momentum must be in [0,1)");
        if (warmup_batches < 1) throw ConfigError("range tracker warm-up must be >= 1 batch");
    }

    void observe(const std::vector<T>& batch) {
        if (frozen_ || batch.empty()) return;
        T lo = batch[0], hi = batch[0];
        for (T v : batch) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("range tracker observed a non-finite activation");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (batches_seen_ == 0) {
            min_ = lo;
            max_ = hi;
        } else {
            min_ = momentum_ * min_ + (T(1) - momentum_) * lo;
            max_ = momentum_ * max_ + (T(1) - momentum_) * hi;
        }
        if (++batches_seen_ >= warmup_batches_) frozen_ = true;
    }

    void observe(const TensorT<T>& batch) { observe(batch.values()); }

    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }
    bool calibrated() const { return batches_seen_ > 0; }
    int64_t batches_seen() const { return batches_seen_; }
    T min() const { return min_; }
    T max() const { return max_; }
    T momentum() const { return momentum_; }
    int warmup_batches() const { return warmup_batches_; }

    /// Restore persisted state (checkpoint loading).
    void restore(T lo, T hi, int64_t batches_seen, bool frozen) {
        min_ = lo;
        max_ = hi;
        batches_seen_ = batches_seen;
        frozen_ = frozen;
    }

    QuantParams<T> params(int bits, bool scale_only_dequant = false) const {
        if (!calibrated())
            throw ConfigError("range tracker queried before observing any batch");
        auto [lo, hi] = expand_degenerate_range(min_, max_);
        return make_quant_params(lo, hi, bits, scale_only_dequant);
    }

private:
    T momentum_;
    int warmup_batches_;
    T min_ = T(0);
    T max_ = T(0);
    int64_t batches_seen_ = 0;
    bool frozen_ = false;
};

/// Min/max of a weight tensor -> per-tensor quantization parameters.
/// All-constant tensors get an eps-expanded range so the scale stays positive.
template <typename T>
QuantParams<T> weight_quant_params(const TensorT<T>& w, int bits,
                                   bool scale_only_dequant = false) {
    const auto& v = w.values();
    T lo = v[0], hi = v[0];
    for (T x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    auto [a, b] = expand_degenerate_range(lo, hi);
    return make_quant_params(a, b, bits, scale_only_dequant);
}

/// Per-output-channel ranges of an OIHW weight tensor.
template <typename T>
std::vector<QuantParams<T>> weight_quant_params_per_channel(const TensorT<T>& w, int bits,
                                                            bool scale_only_dequant = false) {
    if (w.ndim() < 2) throw ShapeError("per-channel calibration expects >= 2-D weights");
    const int64_t channels = w.dim(0);
    const int64_t per = w.numel() / channels;
    std::vector<QuantParams<T>> out;
    out.reserve(channels);
    for (int64_t c = 0; c < channels; ++c) {
        const T* row = w.values().data() + c * per;
        T lo = row[0], hi = row[0];
        for (int64_t i = 0; i < per; ++i) {
            lo = std::min(lo, row[i]);
            hi = std::max(hi, row[i]);
        }
        auto [a, b] = expand_degenerate_range(lo, hi);
        auto p = make_quant_params(a, b, bits, scale_only_dequant);
        p.granularity = QuantGranularity::PerChannel;
        out.push_back(p);
    }
    return out;
}

}  // namespace lrq
