#include "dorl/lora.hpp"

namespace dorl {

SegTrainResult train_seg(SegModel& model, const Dataset& data, const SegTrainConfig& cfg) {
    std::vector<size_t> with_mask;
    for (size_t i = 0; i < data.samples.size(); ++i)
        if (data.samples[i].has_mask()) with_mask.push_back(i);
    if (with_mask.empty()) throw DataError("train_seg: no mask-annotated samples");
    size_t n_annot = (size_t)std::ceil(cfg.annotated_fraction * (double)data.samples.size());
    n_annot = std::max<size_t>(1, n_annot);
    if (with_mask.size() < n_annot)
        throw DataError("train_seg: need " + std::to_string(n_annot) + " annotated samples, have " +
                        std::to_string(with_mask.size()));

    Rng pick(cfg.seed, "seg.annotated");
    for (size_t i = with_mask.size(); i > 1; --i) std::swap(with_mask[i - 1], with_mask[pick.below(i)]);
    with_mask.resize(n_annot);

    SegTrainResult res;
    for (size_t i : with_mask) res.annotated_ids.push_back(data.samples[i].id);

    AdamW<float> opt(cfg.adamw);
    ScheduleConfig sched = default_schedule(cfg.adamw.lr, cfg.epochs * (int64_t)n_annot);

    // masks and pixel tensors reused across epochs
    std::vector<TensorF> images, masks;
    for (size_t i : with_mask) {
        images.push_back(data.samples[i].pixels_tensor<float>());
        masks.push_back(data.samples[i].mask_tensor<float>());
    }

    int64_t step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order(n_annot);
        for (size_t k = 0; k < n_annot; ++k) order[k] = k;
        Rng shuf(cfg.seed, "seg.order", (uint64_t)epoch);
        for (size_t i = n_annot; i > 1; --i) std::swap(order[i - 1], order[shuf.below(i)]);

        double epoch_loss = 0;
        for (size_t k : order) {
            ParamCtx<float> P(model.params, /*train=*/true);
            SegOutputT<float> out = segment(images[k], model, P);
            Var<float> loss = seg_loss(out.mask_probs, masks[k]);
            backward(loss);
            epoch_loss += (double)loss->value[0];
            opt.step(model.params, P.collect_grads(), lr_at(step, sched));
            ++step;
        }
        res.epoch_loss.push_back(epoch_loss / (double)n_annot);
    }
    model.fitted = true;
    return res;
}

}  // namespace dorl
