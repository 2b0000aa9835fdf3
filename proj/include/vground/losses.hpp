#pragma once

// Training objectives: spatial box losses over the ground-truth span,
// temporal start/end KL against discretized Gaussian targets, positive-
// weighted foreground BCE, and the guided-attention term that pulls temporal
// self-attention mass into the ground-truth segment.

#include <cmath>
#include <optional>
#include <vector>

#include "vground/array.hpp"
#include "vground/config.hpp"
#include "vground/data.hpp"
#include "vground/model.hpp"

namespace vground {

struct LossWeights {
    double l1 = 5.0;
    double giou = 2.0;
    double kl = 10.0;
    double att = 1.0;
    double fg = 2.0;
};

template <typename Real>
struct WindowTargets {
    int start = 0;  // clipped to the window
    int end = 0;
    Array<Real> p_start;  // [w], sums to 1
    Array<Real> p_end;    // [w], sums to 1
    Array<Real> fg;       // [w], 1 inside [start, end]
    std::optional<Array<Real>> boxes;  // [(end-start+1) x 4]
};

struct LossBreakdown {
    double total = 0, kl_s = 0, kl_e = 0, bce = 0, att = 0, l1 = 0, giou = 0;
};

// Unit-variance normal density sampled at integer offsets, renormalized.
template <typename Real>
Array<Real> gaussian_target(int center, int w) {
    if (center < 0 || center >= w) throw ContractError("gaussian_target: center outside the window");
    Array<Real> out({w});
    auto o = out.mutable_data();
    Real total = 0;
    for (int t = 0; t < w; ++t) {
        const Real d = static_cast<Real>(t - center);
        o[static_cast<std::size_t>(t)] = std::exp(-d * d / Real(2));
        total += o[static_cast<std::size_t>(t)];
    }
    for (auto& v : o) v /= total;
    return out;
}

// Targets for one window. `gt` is in window-local coordinates and may stick
// out on either side; it is clipped first. `segment_boxes`, when given, holds
// one box per frame of the unclipped ground-truth segment.
template <typename Real>
WindowTargets<Real> build_window_targets(Segment gt, int w, const std::vector<Box>* segment_boxes = nullptr) {
    if (gt.end < 0 || gt.start > w - 1) throw ContractError("window does not intersect the ground truth");
    WindowTargets<Real> tgt;
    tgt.start = std::max(0, gt.start);
    tgt.end = std::min(w - 1, gt.end);
    tgt.p_start = gaussian_target<Real>(tgt.start, w);
    tgt.p_end = gaussian_target<Real>(tgt.end, w);
    tgt.fg = Array<Real>({w});
    auto f = tgt.fg.mutable_data();
    for (int t = tgt.start; t <= tgt.end; ++t) f[static_cast<std::size_t>(t)] = Real(1);
    if (segment_boxes != nullptr) {
        const int n = tgt.end - tgt.start + 1;
        Array<Real> boxes({n, 4});
        auto o = boxes.mutable_data();
        for (int i = 0; i < n; ++i) {
            const Box& b = (*segment_boxes)[static_cast<std::size_t>(tgt.start + i - gt.start)];
            o[static_cast<std::size_t>(i) * 4 + 0] = static_cast<Real>(b.cx);
            o[static_cast<std::size_t>(i) * 4 + 1] = static_cast<Real>(b.cy);
            o[static_cast<std::size_t>(i) * 4 + 2] = static_cast<Real>(b.w);
            o[static_cast<std::size_t>(i) * 4 + 3] = static_cast<Real>(b.h);
        }
        tgt.boxes = std::move(boxes);
    }
    return tgt;
}

// Mean over boxes of the summed absolute coordinate differences.
template <typename Real>
Array<Real> l1_box_loss(const Array<Real>& pred, const Array<Real>& target) {
    if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 4)
        throw ShapeError("l1_box_loss: need matching [n x 4] boxes");
    return scale(sum(abs_op(sub(pred, target))), Real(1) / static_cast<Real>(pred.dim(0)));
}

namespace detail {

template <typename Real>
struct BoxCorners {
    Array<Real> x1, y1, x2, y2, area;
};

template <typename Real>
BoxCorners<Real> corners_of(const Array<Real>& boxes) {
    Array<Real> cx = slice_cols(boxes, 0, 1);
    Array<Real> cy = slice_cols(boxes, 1, 2);
    Array<Real> w = slice_cols(boxes, 2, 3);
    Array<Real> h = slice_cols(boxes, 3, 4);
    BoxCorners<Real> c;
    c.x1 = sub(cx, scale(w, Real(0.5)));
    c.x2 = add(cx, scale(w, Real(0.5)));
    c.y1 = sub(cy, scale(h, Real(0.5)));
    c.y2 = add(cy, scale(h, Real(0.5)));
    c.area = mul(w, h);
    return c;
}

}  // namespace detail

// Mean over boxes of 1 - gIoU; per-box values lie in [0,2]. Degenerate boxes
// contribute zero area, the enclosing box keeps everything well defined.
template <typename Real>
Array<Real> giou_loss(const Array<Real>& pred, const Array<Real>& target) {
    if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 4)
        throw ShapeError("giou_loss: need matching [n x 4] boxes");
    const int n = pred.dim(0);
    auto a = detail::corners_of(pred);
    auto b = detail::corners_of(target);
    Array<Real> iw = relu(sub(minimum(a.x2, b.x2), maximum(a.x1, b.x1)));
    Array<Real> ih = relu(sub(minimum(a.y2, b.y2), maximum(a.y1, b.y1)));
    Array<Real> inter = mul(iw, ih);
    Array<Real> uni = sub(add(a.area, b.area), inter);
    Array<Real> iou = divide(inter, uni);
    Array<Real> cw = sub(maximum(a.x2, b.x2), minimum(a.x1, b.x1));
    Array<Real> chh = sub(maximum(a.y2, b.y2), minimum(a.y1, b.y1));
    Array<Real> c_area = mul(cw, chh);
    Array<Real> giou = sub(iou, divide(sub(c_area, uni), c_area));
    Array<Real> ones = Array<Real>::full({n, 1}, Real(1));
    return scale(sum(sub(ones, giou)), Real(1) / static_cast<Real>(n));
}

// KL(p || softmax(logits)) with the target as reference; 0 log 0 = 0.
template <typename Real>
Array<Real> kl_loss(const Array<Real>& logits, const Array<Real>& target) {
    if (logits.shape() != target.shape() || logits.rank() != 1) throw ShapeError("kl_loss: need matching [w] arrays");
    Real entropy_term = 0;  // sum p log p
    for (Real p : target.data())
        if (p > Real(0)) entropy_term += p * std::log(p);
    Array<Real> cross = scale(sum(mul(target, log_softmax(logits, 0))), Real(-1));
    return add_scalar(cross, entropy_term);
}

// Positive-weighted BCE; the positive weight is the window's negative/positive
// ratio clamped to [1,100] (1 when the window has no positives).
template <typename Real>
Array<Real> foreground_bce(const Array<Real>& pred, const Array<Real>& target) {
    if (pred.shape() != target.shape() || pred.rank() != 1)
        throw ShapeError("foreground_bce: need matching [w] arrays");
    const int w = pred.dim(0);
    int positives = 0;
    for (Real v : target.data())
        if (v > Real(0.5)) ++positives;
    Real alpha = Real(1);
    if (positives > 0)
        alpha = std::min(Real(100), std::max(Real(1), static_cast<Real>(w - positives) / static_cast<Real>(positives)));

    Array<Real> w_pos({w}), w_neg({w});
    {
        auto tp = target.data();
        auto p = w_pos.mutable_data();
        auto q = w_neg.mutable_data();
        for (int i = 0; i < w; ++i) {
            const bool on = tp[static_cast<std::size_t>(i)] > Real(0.5);
            p[static_cast<std::size_t>(i)] = on ? alpha : Real(0);
            q[static_cast<std::size_t>(i)] = on ? Real(0) : Real(1);
        }
    }
    Array<Real> clamped = clamp(pred, Real(1e-6), Real(1) - Real(1e-6));
    Array<Real> ones = Array<Real>::full({w}, Real(1));
    Array<Real> log_on = log_op(clamped);
    Array<Real> log_off = log_op(sub(ones, clamped));
    Array<Real> total = add(mul(w_pos, log_on), mul(w_neg, log_off));
    return scale(sum(total), Real(-1) / static_cast<Real>(w));
}

// Pulls head- and layer-averaged temporal self-attention mass into [s, e]:
// -(1/T) sum_t log(sum_{t' in [s,e]} A_bar[t,t'] + 1e-8).
template <typename Real>
Array<Real> guided_attention_loss(const AttentionMaps<Real>& maps, int s, int e) {
    if (maps.weights.empty()) throw ContractError("guided_attention_loss: no recorded attention");
    const int t_len = maps.weights.front().dim(0);
    if (s < 0 || e < s || e >= t_len) throw ContractError("guided_attention_loss: bad segment");
    Array<Real> avg = maps.weights.front();
    for (std::size_t i = 1; i < maps.weights.size(); ++i) avg = add(avg, maps.weights[i]);
    avg = scale(avg, Real(1) / static_cast<Real>(maps.weights.size()));
    Array<Real> in_segment = slice_cols(avg, s, e + 1);
    Array<Real> ones = Array<Real>::full({e - s + 1, 1}, Real(1));
    Array<Real> row_mass = matmul(in_segment, ones);  // [T x 1]
    Array<Real> logs = log_op(add_scalar(row_mass, Real(1e-8)));
    return scale(sum(logs), Real(-1) / static_cast<Real>(t_len));
}

// Per-task composition. All tasks use the temporal terms; the spatial pair is
// added for VQ2D over the clipped ground-truth frames only. The breakdown
// holds the weighted contribution of each term.
template <typename Real>
std::pair<Array<Real>, LossBreakdown> task_loss(Task task, const FramePredictions<Real>& preds,
                                                const AttentionMaps<Real>& maps, const WindowTargets<Real>& tgt,
                                                const LossWeights& lw) {
    if (task == Task::VQ2D && !tgt.boxes.has_value())
        throw ContractError("task_loss: VQ2D targets require ground-truth boxes");

    LossBreakdown bd;
    Array<Real> kl_s = kl_loss(preds.start_logits, tgt.p_start);
    Array<Real> kl_e = kl_loss(preds.end_logits, tgt.p_end);
    Array<Real> bce = foreground_bce(preds.foreground, tgt.fg);
    Array<Real> att = guided_attention_loss(maps, tgt.start, tgt.end);

    Array<Real> total = scale(add(kl_s, kl_e), static_cast<Real>(lw.kl));
    total = add(total, scale(bce, static_cast<Real>(lw.fg)));
    total = add(total, scale(att, static_cast<Real>(lw.att)));
    bd.kl_s = lw.kl * static_cast<double>(kl_s.item());
    bd.kl_e = lw.kl * static_cast<double>(kl_e.item());
    bd.bce = lw.fg * static_cast<double>(bce.item());
    bd.att = lw.att * static_cast<double>(att.item());

    if (task == Task::VQ2D) {
        Array<Real> pred_boxes = slice_rows(preds.boxes, tgt.start, tgt.end + 1);
        Array<Real> l1 = l1_box_loss(pred_boxes, *tgt.boxes);
        Array<Real> gi = giou_loss(pred_boxes, *tgt.boxes);
        total = add(total, add(scale(l1, static_cast<Real>(lw.l1)), scale(gi, static_cast<Real>(lw.giou))));
        bd.l1 = lw.l1 * static_cast<double>(l1.item());
        bd.giou = lw.giou * static_cast<double>(gi.item());
    }
    bd.total = static_cast<double>(total.item());
    return {total, bd};
}

}  // namespace vground
