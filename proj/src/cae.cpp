#include "dorl/cae.hpp"

#include "dorl/optim.hpp"

namespace dorl {

namespace {

TensorF image_tensor(const CAESample& s, const CAEConfig& cfg) {
    const int64_t hw = cfg.image_size();
    TensorF t({hw, hw, cfg.channels});
    for (size_t i = 0; i < s.image.size(); ++i) t[(int64_t)i] = (float)(s.image[i] / 255.0);
    return t;
}

// k distinct sample indices from a domain of size n (all of them if n <= k)
std::vector<size_t> draw_batch(size_t n, size_t k, uint64_t seed, const std::string& domain, uint64_t step) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed, "cae.batch." + domain, step);
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    idx.resize(std::min(n, k));
    return idx;
}

}  // namespace

std::vector<LossBreakdown> train_cae(CAEModel& model, const std::vector<CAEDomain>& domains,
                                     const CAETrainConfig& cfg) {
    const CAEConfig& ccfg = model.cfg;
    ccfg.validate();
    if (domains.size() < 2) throw ConfigError("train_cae: MMD needs at least two domains");
    if (cfg.beta < 0 || cfg.lambda < 0 || cfg.w_mmd < 0 || cfg.w_ssim < 0)
        throw ConfigError("train_cae: loss weights must be non-negative");
    if (cfg.epochs < 1 || cfg.batch_per_domain < 1) throw ConfigError("train_cae: epochs and batch size must be >= 1");

    const int64_t t = ccfg.tokens(), d = ccfg.embed_dim;
    const int64_t img_bytes = ccfg.image_size() * ccfg.image_size() * ccfg.channels;
    size_t n_total = 0;
    for (const auto& dom : domains) {
        for (const auto& s : dom.samples) {
            if (s.embedding.rows() != t || s.embedding.cols() != d)
                throw ShapeError("train_cae: embedding of " + s.id + " is " + shape_str(s.embedding.shape()));
            if (s.image.empty()) throw DataError("train_cae: sample " + s.id + " has no segmented image c_i");
            if ((int64_t)s.image.size() != img_bytes)
                throw DataError("train_cae: segmented image of " + s.id + " has the wrong size");
        }
        n_total += dom.samples.size();
    }
    if (n_total == 0) throw DataError("train_cae: no samples");

    std::vector<std::pair<size_t, size_t>> pairs;
    for (size_t i = 0; i < domains.size(); ++i)
        for (size_t j = i + 1; j < domains.size(); ++j) pairs.emplace_back(i, j);

    const int64_t steps_per_epoch =
        std::max<int64_t>(1, (int64_t)((n_total + 2 * cfg.batch_per_domain - 1) / (2 * cfg.batch_per_domain)));
    AdamW<float> opt(cfg.adamw);
    ScheduleConfig sched = default_schedule(cfg.adamw.lr, cfg.epochs * steps_per_epoch);

    const bool use_mmd = cfg.lambda * cfg.w_mmd > 0;
    const bool use_ssim = cfg.w_ssim > 0;

    // forward to the projected MMD feature p_i; shared by both passes so the
    // second (gradient) pass sees bit-identical values
    auto forward_proj = [&](const CAESample& s, uint64_t mask_seed, ParamCtx<float>& P,
                            MaskedBatchT<float>& mb_out) {
        mb_out = mask_patches(s.embedding, cfg.rho, mask_seed, s.id, ccfg.grid, ccfg.grid);
        Var<float> z = cae_encode(mb_out, ccfg, P);
        Var<float> m = decode_features(z, mb_out, ccfg, P);
        return std::make_pair(m, gap_project(m, P));
    };

    std::vector<LossBreakdown> trace;
    int64_t gstep = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double ep_rec = 0, ep_mmd = 0, ep_ssim = 0;
        for (int64_t st = 0; st < steps_per_epoch; ++st, ++gstep) {
            auto [si, ti] = pairs[(size_t)gstep % pairs.size()];
            const CAEDomain& src = domains[si];
            const CAEDomain& tgt = domains[ti];
            auto src_idx = draw_batch(src.samples.size(), (size_t)cfg.batch_per_domain, cfg.seed, src.name, (uint64_t)gstep);
            auto tgt_idx = draw_batch(tgt.samples.size(), (size_t)cfg.batch_per_domain, cfg.seed, tgt.name, (uint64_t)gstep);
            const uint64_t mask_seed = Rng(cfg.seed, "cae.maskseed", (uint64_t)gstep).next_u64();
            const double b_sz = (double)(src_idx.size() + tgt_idx.size());

            std::map<std::string, TensorF> acc;
            double step_rec = 0, step_ssim = 0;
            std::vector<std::vector<double>> proj_s, proj_t;

            // pass 1: reconstruction + SSIM gradients per sample; MMD
            // features recorded value-only (per-sample graphs are freed, so
            // memory stays flat in the batch size)
            auto pass1 = [&](const CAEDomain& dom, const std::vector<size_t>& idx,
                             std::vector<std::vector<double>>& proj) {
                for (size_t k : idx) {
                    const CAESample& s = dom.samples[k];
                    ParamCtx<float> P(model.params, /*train=*/true);
                    MaskedBatchT<float> mb;
                    auto [m, p] = forward_proj(s, mask_seed, P, mb);
                    proj.emplace_back(p->value.data(), p->value.data() + p->value.numel());

                    Var<float> rec;
                    if (cfg.rec_masked_only && !mb.masked_idx.empty()) {
                        TensorF e_masked({(int64_t)mb.masked_idx.size(), d});
                        for (size_t r = 0; r < mb.masked_idx.size(); ++r)
                            e_masked.mat().row((int64_t)r) = s.embedding.mat().row(mb.masked_idx[r]);
                        rec = loss_rec(e_masked, gather_rows(m, mb.masked_idx));
                    } else {
                        rec = loss_rec(s.embedding, m);
                    }
                    step_rec += rec->value[0];
                    Var<float> obj = scale(rec, (float)(cfg.lambda * cfg.beta / b_sz));
                    if (use_ssim) {
                        Var<float> h = decode_image(m, ccfg, P);
                        Var<float> ls = loss_ssim(h, constant<float>(image_tensor(s, ccfg)));
                        step_ssim += ls->value[0];
                        obj = add(obj, scale(ls, (float)(cfg.w_ssim / b_sz)));
                    }
                    backward(obj);
                    P.accumulate_grads(acc);
                }
            };
            pass1(src, src_idx, proj_s);
            pass1(tgt, tgt_idx, proj_t);

            std::vector<double> diff((size_t)ccfg.proj_dim, 0.0);
            for (auto& p : proj_s)
                for (size_t i = 0; i < diff.size(); ++i) diff[i] += p[i] / (double)proj_s.size();
            for (auto& p : proj_t)
                for (size_t i = 0; i < diff.size(); ++i) diff[i] -= p[i] / (double)proj_t.size();
            double step_mmd = 0;
            for (double v : diff) step_mmd += v * v;

            // pass 2: exact MMD gradient via the linear surrogate
            // g_i^T p_i with g_i = +-2*lambda*w_mmd*diff/n_side, which has the
            // same derivative w.r.t. p_i as lambda*w_mmd*||mu_s - mu_t||^2
            if (use_mmd) {
                auto pass2 = [&](const CAEDomain& dom, const std::vector<size_t>& idx, double sign, size_t n_side) {
                    TensorF g({1, ccfg.proj_dim});
                    for (int64_t i = 0; i < ccfg.proj_dim; ++i)
                        g[i] = (float)(sign * 2.0 * cfg.lambda * cfg.w_mmd * diff[(size_t)i] / (double)n_side);
                    for (size_t k : idx) {
                        ParamCtx<float> P(model.params, /*train=*/true);
                        MaskedBatchT<float> mb;
                        auto [m, p] = forward_proj(dom.samples[k], mask_seed, P, mb);
                        (void)m;
                        backward(sum(mul(p, constant<float>(g.clone()))));
                        P.accumulate_grads(acc);
                    }
                };
                pass2(src, src_idx, +1.0, src_idx.size());
                pass2(tgt, tgt_idx, -1.0, tgt_idx.size());
            }

            // toggled-off loss terms leave their private parameters (e.g. the
            // projection head) without gradients; AdamW expects a full set
            for (auto& [name, p] : model.params.params())
                if (!model.params.frozen(name) && !acc.count(name)) acc.emplace(name, TensorF(p.shape()));

            opt.step(model.params, acc, lr_at(gstep, sched));
            ep_rec += step_rec / b_sz;
            ep_ssim += step_ssim / b_sz;
            ep_mmd += step_mmd;
        }
        trace.push_back(total_loss(ep_ssim / (double)steps_per_epoch, ep_rec / (double)steps_per_epoch,
                                   ep_mmd / (double)steps_per_epoch, cfg.beta, cfg.lambda));
    }
    model.fitted = true;
    return trace;
}

}  // namespace dorl
