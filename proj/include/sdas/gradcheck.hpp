// Finite-difference verification of reverse-mode gradients.
//
// For a scalar-valued function of one or more tensors, compares the tape
// gradient of every input element against central differences taken at two
// step sizes (h and h/2). The two estimates are Richardson-combined into a
// fourth-order reference; probes where they disagree beyond what smooth
// truncation error allows sit on a non-differentiable point (a ReLU kink or
// pooling-argmax tie crossed inside the probe interval), where no finite
// difference is a valid reference, and are excluded and counted instead of
// compared. The reported figure per tensor is
// max_i |analytic_i - reference_i| / max(1, |reference_i|), i.e. absolute
// error for small gradients and relative error for large ones.
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sdas/common.hpp"
#include "sdas/tensor.hpp"

namespace sdas {

template <typename S>
struct GradCheckReport {
    std::vector<S> max_error;  // one entry per checked input
    S worst = S(0);
    index_t probes = 0;        // elements examined
    index_t skipped = 0;       // elements straddling a non-smooth point
    bool finite = true;        // false if any loss or gradient was NaN/inf

    // At most one probe per thousand (and never a majority) may be excluded
    // for landing on a kink; more than that means the function is not smooth
    // enough to audit, which is itself a failure.
    bool pass(S tol) const {
        if (!finite || worst > tol) return false;
        const index_t budget = std::max<index_t>(1, probes / 1000);
        return skipped <= budget && skipped * 2 < std::max<index_t>(probes, 1);
    }
};

// `loss_fn` must re-run the computation from the current input values and
// return a scalar tensor. Gradients are taken with one taped pass; numeric
// probes run with the tape paused so they leave no trace.
template <typename S>
GradCheckReport<S> grad_check(const std::function<Tensor<S>()>& loss_fn,
                              std::vector<Tensor<S>> inputs, S h = S(1e-5)) {
    GradCheckReport<S> report;

    for (auto& t : inputs) t.zero_grad();
    {
        Tape<S> tape;
        Tensor<S> loss = loss_fn();
        if (!std::isfinite(static_cast<double>(loss.item()))) report.finite = false;
        tape.backward(loss);
    }

    for (auto& t : inputs) {
        S worst = S(0);
        auto xd = t.data_mut();
        auto ag = t.grad_mut();  // zeros if no gradient flowed
        for (index_t i = 0; i < t.size(); ++i) {
            ++report.probes;
            const S saved = xd[i];
            const S analytic = ag[i];
            if (!std::isfinite(static_cast<double>(analytic))) {
                report.finite = false;
                worst = std::numeric_limits<S>::infinity();
                continue;
            }
            // Probe at h, then h/8, then h/64. Smooth functions shrink the
            // central-difference truncation error by 4x between a step and
            // half that step; a larger gap means the interval straddles a
            // non-smooth point. Shrinking the step moves the interval off
            // the kink, so only a kink sitting essentially on the probe
            // point itself survives every rung and is skipped.
            bool settled = false, bad = false;
            S reference = S(0);
            for (S hp = h; hp >= h / S(64); hp /= S(8)) {
                S fp, fm, fp2, fm2;
                {
                    typename Tape<S>::Pause pause;
                    xd[i] = saved + hp;
                    fp = loss_fn().item();
                    xd[i] = saved - hp;
                    fm = loss_fn().item();
                    xd[i] = saved + hp / S(2);
                    fp2 = loss_fn().item();
                    xd[i] = saved - hp / S(2);
                    fm2 = loss_fn().item();
                    xd[i] = saved;
                }
                const S coarse = (fp - fm) / (S(2) * hp);
                const S fine = (fp2 - fm2) / hp;
                if (!std::isfinite(static_cast<double>(coarse)) ||
                    !std::isfinite(static_cast<double>(fine))) {
                    bad = true;
                    break;
                }
                if (std::abs(coarse - fine) <= S(2e-6) * std::max(S(1), std::abs(fine))) {
                    reference = (S(4) * fine - coarse) / S(3);
                    settled = true;
                    break;
                }
            }
            if (bad) {
                report.finite = false;
                worst = std::numeric_limits<S>::infinity();
                continue;
            }
            if (!settled) {
                ++report.skipped;
                continue;
            }
            const S err = std::abs(analytic - reference) / std::max(S(1), std::abs(reference));
            worst = std::max(worst, err);
        }
        report.max_error.push_back(worst);
        report.worst = std::max(report.worst, worst);
    }
    return report;
}

}  // namespace sdas
