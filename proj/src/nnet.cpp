#include "epg/nnet.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>

#include "epg/core/kernels.hpp"

namespace epg::nn {

using kern::parallel;

void NetworkConfig::validate() const {
    if (resolution % patch != 0)
        throw std::invalid_argument("NetworkConfig: resolution must be divisible by patch");
    if (dim_enc % heads_enc != 0 || dim_dec % heads_dec != 0)
        throw std::invalid_argument("NetworkConfig: dims must be divisible by heads");
    if (dim_enc % 2 != 0 || dim_dec % 2 != 0)
        throw std::invalid_argument("NetworkConfig: dims must be even");
    if (enc_blocks < 1 || dec_blocks < 1)
        throw std::invalid_argument("NetworkConfig: need at least one block per side");
    if (dec_blocks > enc_blocks)
        throw std::invalid_argument("NetworkConfig: dec_blocks must not exceed enc_blocks");
}

// ---- Linear -------------------------------------------------------------------

void Linear::init(int64_t in_, int64_t out_, Rng& rng, bool bias) {
    w = Tensor({in_, out_});
    gw = Tensor({in_, out_});
    has_bias = bias;
    const double a = std::sqrt(6.0 / static_cast<double>(in_ + out_));
    for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-a, a);
    if (bias) {
        b = Tensor({out_});
        gb = Tensor({out_});
    }
}

void Linear::init_zero(int64_t in_, int64_t out_, bool bias) {
    w = Tensor({in_, out_});
    gw = Tensor({in_, out_});
    has_bias = bias;
    if (bias) {
        b = Tensor({out_});
        gb = Tensor({out_});
    }
}

void Linear::fwd(const Tensor& X, Tensor& Y) const {
    const int64_t rows = X.numel() / in();
    Y = Tensor::uninit({rows, out()});
    kern::gemm_nn(X.data(), w.data(), Y.data(), rows, in(), out(), false);
    if (has_bias) kern::add_bias(Y.data(), b.data(), rows, out());
}

void Linear::bwd(const Tensor& X, const Tensor& dY, Tensor* dX, bool accum_dx, bool accum_params) {
    const int64_t rows = X.numel() / in();
    if (accum_params) {
        kern::gemm_tn(X.data(), dY.data(), gw.data(), in(), rows, out(), true);
        if (has_bias) kern::bias_grad(dY.data(), gb.data(), rows, out());
    }
    if (dX) {
        if (!accum_dx) *dX = Tensor::uninit({rows, in()});
        // dX = dY @ w^T via an explicit transpose: the nn kernel streams far
        // better than the dot-product form, and the k-order (and therefore the
        // rounding) is identical.
        Tensor wt = Tensor::uninit({out(), in()});
        for (int64_t i = 0; i < in(); ++i)
            for (int64_t j = 0; j < out(); ++j) wt[j * in() + i] = w[i * out() + j];
        kern::gemm_nn(dY.data(), wt.data(), dX->data(), rows, out(), in(), accum_dx);
    }
}

void Linear::visit(const std::string& prefix, const ParamVisitor& v) {
    v(prefix + ".w", w, gw, decay_w);
    if (has_bias) v(prefix + ".b", b, gb, false);
}

// ---- LayerNorm -----------------------------------------------------------------

void LayerNorm::init(int64_t d, bool affine_) {
    dim = d;
    affine = affine_;
    if (affine) {
        g = Tensor::full({d}, 1.0);
        b = Tensor({d});
        gg = Tensor({d});
        gb = Tensor({d});
    }
}

void LayerNorm::fwd(const Tensor& X, Tensor& Y, Cache& c) const {
    const int64_t rows = X.numel() / dim;
    Y = Tensor::uninit(X.shape());
    c.x = X;
    c.mean = Tensor::uninit({rows});
    c.rstd = Tensor::uninit({rows});
    kern::layernorm_fwd(X.data(), affine ? g.data() : nullptr, affine ? b.data() : nullptr, Y.data(),
                        c.mean.data(), c.rstd.data(), rows, dim, eps);
}

void LayerNorm::bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params) {
    const int64_t rows = c.x.numel() / dim;
    if (!accum_dx) dX = Tensor::uninit(c.x.shape());
    kern::layernorm_bwd(c.x.data(), affine ? g.data() : nullptr, dY.data(), c.mean.data(),
                        c.rstd.data(), dX.data(), (affine && accum_params) ? gg.data() : nullptr,
                        (affine && accum_params) ? gb.data() : nullptr, rows, dim, accum_dx);
}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& v) {
    if (affine) {
        v(prefix + ".g", g, gg, false);
        v(prefix + ".b", b, gb, false);
    }
}

// ---- Attention ------------------------------------------------------------------

void Attention::init(int64_t d, int64_t h, Rng& rng) {
    dim = d;
    heads = h;
    qkv.init(d, 3 * d, rng);
    proj.init(d, d, rng);
}

void Attention::fwd(const Tensor& X, int64_t B, int64_t T, Tensor& Y, Cache& c) const {
    const int64_t D = dim, H = heads, hd = D / H;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
    c.x = X;
    qkv.fwd(X, c.qkv_o);
    c.probs = Tensor::uninit({B, H, T, T});
    c.ctx = Tensor::uninit({B * T, D});
    const double* Q = c.qkv_o.data();
    double* P = c.probs.data();
    double* CTX = c.ctx.data();
#pragma omp parallel for collapse(2) schedule(static) if (parallel())
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            double* probs = P + ((b * H + h) * T) * T;
            for (int64_t t1 = 0; t1 < T; ++t1) {
                const double* q = Q + (b * T + t1) * 3 * D + h * hd;
                double* row = probs + t1 * T;
                for (int64_t t2 = 0; t2 < T; ++t2) {
                    const double* k = Q + (b * T + t2) * 3 * D + D + h * hd;
                    double s = 0.0;
                    for (int64_t i = 0; i < hd; ++i) s += q[i] * k[i];
                    row[t2] = s * scl;
                }
                kern::softmax_rows_serial(row, 1, T);
                double* ctx = CTX + (b * T + t1) * D + h * hd;
                for (int64_t i = 0; i < hd; ++i) ctx[i] = 0.0;
                for (int64_t t2 = 0; t2 < T; ++t2) {
                    const double p = row[t2];
                    const double* v = Q + (b * T + t2) * 3 * D + 2 * D + h * hd;
                    for (int64_t i = 0; i < hd; ++i) ctx[i] += p * v[i];
                }
            }
        }
    }
    proj.fwd(c.ctx, Y);
}

void Attention::bwd(const Cache& c, int64_t B, int64_t T, const Tensor& dY, Tensor& dX,
                    bool accum_dx, bool accum_params) {
    const int64_t D = dim, H = heads, hd = D / H;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor dctx;
    proj.bwd(c.ctx, dY, &dctx, false, accum_params);
    Tensor dqkv({B * T, 3 * D});
    const double* Q = c.qkv_o.data();
    const double* P = c.probs.data();
    const double* DC = dctx.data();
    double* DQ = dqkv.data();
#pragma omp parallel for collapse(2) schedule(static) if (parallel())
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t h = 0; h < H; ++h) {
            std::vector<double> dscore(static_cast<size_t>(T));
            for (int64_t t1 = 0; t1 < T; ++t1) {
                const double* probs = P + ((b * H + h) * T + t1) * T;
                const double* dc = DC + (b * T + t1) * D + h * hd;
                // dprobs then softmax backward (fused)
                double dot_pp = 0.0;
                for (int64_t t2 = 0; t2 < T; ++t2) {
                    const double* v = Q + (b * T + t2) * 3 * D + 2 * D + h * hd;
                    double dp = 0.0;
                    for (int64_t i = 0; i < hd; ++i) dp += dc[i] * v[i];
                    dscore[static_cast<size_t>(t2)] = dp;
                    dot_pp += probs[t2] * dp;
                }
                for (int64_t t2 = 0; t2 < T; ++t2)
                    dscore[static_cast<size_t>(t2)] =
                        probs[t2] * (dscore[static_cast<size_t>(t2)] - dot_pp) * scl;
                // dv, dq, dk
                const double* q = Q + (b * T + t1) * 3 * D + h * hd;
                double* dq = DQ + (b * T + t1) * 3 * D + h * hd;
                for (int64_t t2 = 0; t2 < T; ++t2) {
                    const double ds = dscore[static_cast<size_t>(t2)];
                    const double p = probs[t2];
                    const double* k = Q + (b * T + t2) * 3 * D + D + h * hd;
                    double* dk = DQ + (b * T + t2) * 3 * D + D + h * hd;
                    double* dv = DQ + (b * T + t2) * 3 * D + 2 * D + h * hd;
                    for (int64_t i = 0; i < hd; ++i) {
                        dq[i] += ds * k[i];
                        dk[i] += ds * q[i];
                        dv[i] += p * dc[i];
                    }
                }
            }
        }
    }
    qkv.bwd(c.x, dqkv, &dX, accum_dx, accum_params);
}

void Attention::visit(const std::string& prefix, const ParamVisitor& v) {
    qkv.visit(prefix + ".qkv", v);
    proj.visit(prefix + ".proj", v);
}

// ---- Mlp -----------------------------------------------------------------------

void Mlp::init(int64_t d, Rng& rng) {
    fc1.init(d, 4 * d, rng);
    fc2.init(4 * d, d, rng);
}

void Mlp::fwd(const Tensor& X, Tensor& Y, Cache& c) const {
    c.x = X;
    fc1.fwd(X, c.h1);
    c.a1 = Tensor::uninit(c.h1.shape());
    kern::gelu_fwd(c.h1.data(), c.a1.data(), c.h1.numel());
    fc2.fwd(c.a1, Y);
}

void Mlp::bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params) {
    Tensor da1;
    fc2.bwd(c.a1, dY, &da1, false, accum_params);
    Tensor dh1 = Tensor::uninit(c.h1.shape());
    kern::gelu_bwd(c.h1.data(), da1.data(), dh1.data(), dh1.numel(), false);
    fc1.bwd(c.x, dh1, &dX, accum_dx, accum_params);
}

void Mlp::visit(const std::string& prefix, const ParamVisitor& v) {
    fc1.visit(prefix + ".fc1", v);
    fc2.visit(prefix + ".fc2", v);
}

// ---- EncBlock ---------------------------------------------------------------------

void EncBlock::init(int64_t d, int64_t heads, Rng& rng) {
    ln1.init(d, true);
    ln2.init(d, true);
    attn.init(d, heads, rng);
    mlp.init(d, rng);
}

void EncBlock::fwd(const Tensor& X, int64_t B, int64_t T, Tensor& Y, Cache& c) const {
    Tensor x1;
    ln1.fwd(X, x1, c.ln1c);
    Tensor a;
    attn.fwd(x1, B, T, a, c.attnc);
    c.h_mid = X;
    kern::add(a.data(), c.h_mid.data(), a.numel());
    Tensor x2;
    ln2.fwd(c.h_mid, x2, c.ln2c);
    Tensor m;
    mlp.fwd(x2, m, c.mlpc);
    Y = c.h_mid;
    kern::add(m.data(), Y.data(), m.numel());
}

void EncBlock::bwd(const Cache& c, int64_t B, int64_t T, const Tensor& dY, Tensor& dX,
                   bool accum_dx, bool accum_params) {
    // Y = h + mlp(ln2(h)),  h = x + attn(ln1(x))
    Tensor dx2;
    mlp.bwd(c.mlpc, dY, dx2, false, accum_params);
    Tensor dh = dY;
    ln2.bwd(c.ln2c, dx2, dh, true, accum_params);
    Tensor dx1;
    attn.bwd(c.attnc, B, T, dh, dx1, false, accum_params);
    if (!accum_dx) {
        dX = dh;
        ln1.bwd(c.ln1c, dx1, dX, true, accum_params);
    } else {
        kern::add(dh.data(), dX.data(), dh.numel());
        ln1.bwd(c.ln1c, dx1, dX, true, accum_params);
    }
}

void EncBlock::visit(const std::string& prefix, const ParamVisitor& v) {
    ln1.visit(prefix + ".ln1", v);
    attn.visit(prefix + ".attn", v);
    ln2.visit(prefix + ".ln2", v);
    mlp.visit(prefix + ".mlp", v);
}

// ---- TimeEmbed -----------------------------------------------------------------------

void TimeEmbed::sinusoidal(const std::vector<double>& t, int64_t dim, Tensor& out) {
    const int64_t B = static_cast<int64_t>(t.size());
    const int64_t half = dim / 2;
    out = Tensor::uninit({B, dim});
    for (int64_t b = 0; b < B; ++b) {
        const double u = std::log(std::max(t[static_cast<size_t>(b)], 1e-20));
        for (int64_t i = 0; i < half; ++i) {
            const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                      static_cast<double>(half));
            out[b * dim + i] = std::sin(u * w);
            out[b * dim + half + i] = std::cos(u * w);
        }
    }
}

void TimeEmbed::init(int64_t d, Rng& rng) {
    dim = d;
    fc1.init(d, d, rng);
    fc1.decay_w = false;
    fc2.init(d, d, rng);
    fc2.decay_w = false;
}

void TimeEmbed::fwd(const std::vector<double>& t, Tensor& Y, Cache& c) const {
    sinusoidal(t, dim, c.sinus);
    fc1.fwd(c.sinus, c.h1);
    c.a1 = Tensor::uninit(c.h1.shape());
    kern::silu_fwd(c.h1.data(), c.a1.data(), c.h1.numel());
    fc2.fwd(c.a1, Y);
}

void TimeEmbed::bwd(const Cache& c, const Tensor& dY, bool accum_params) {
    Tensor da1;
    fc2.bwd(c.a1, dY, &da1, false, accum_params);
    Tensor dh1 = Tensor::uninit(c.h1.shape());
    kern::silu_bwd(c.h1.data(), da1.data(), dh1.data(), dh1.numel(), false);
    fc1.bwd(c.sinus, dh1, nullptr, false, accum_params);
}

void TimeEmbed::visit(const std::string& prefix, const ParamVisitor& v) {
    fc1.visit(prefix + ".fc1", v);
    fc2.visit(prefix + ".fc2", v);
}

// ---- Patch plumbing ---------------------------------------------------------------------

void patchify(const Tensor& x, int64_t patch, Tensor& out) {
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t side = H / patch, P = side * side, pd = patch * patch * C;
    out = Tensor::uninit({B * P, pd});
#pragma omp parallel for schedule(static) if (parallel() && B > 1)
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t py = 0; py < side; ++py)
            for (int64_t px = 0; px < side; ++px) {
                double* row = out.data() + (b * P + py * side + px) * pd;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dy = 0; dy < patch; ++dy)
                        for (int64_t dx = 0; dx < patch; ++dx)
                            row[(c * patch + dy) * patch + dx] =
                                x[((b * C + c) * H + py * patch + dy) * W + px * patch + dx];
            }
    }
}

void unpatchify(const Tensor& tokens, int64_t patch, int64_t resolution, Tensor& out) {
    const int64_t pd = tokens.dim(tokens.ndim() - 1), C = pd / (patch * patch);
    const int64_t side = resolution / patch, P = side * side;
    const int64_t B = tokens.numel() / (P * pd);
    out = Tensor::uninit({B, C, resolution, resolution});
#pragma omp parallel for schedule(static) if (parallel() && B > 1)
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t py = 0; py < side; ++py)
            for (int64_t px = 0; px < side; ++px) {
                const double* row = tokens.data() + (b * P + py * side + px) * pd;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t dy = 0; dy < patch; ++dy)
                        for (int64_t dx = 0; dx < patch; ++dx)
                            out[((b * C + c) * resolution + py * patch + dy) * resolution +
                                px * patch + dx] = row[(c * patch + dy) * patch + dx];
            }
    }
}

// ---- Encoder ------------------------------------------------------------------------------

void Encoder::init(const NetworkConfig& c, const sched::DiffusionConfig& d, Rng& rng) {
    c.validate();
    cfg = c;
    diff = d;
    patch_embed.init(cfg.patch_dim(), cfg.dim_enc, rng);
    cls_token = Tensor::randn({cfg.dim_enc}, rng, 0.02);
    g_cls_token = Tensor({cfg.dim_enc});
    pos_emb = Tensor::randn({cfg.patches(), cfg.dim_enc}, rng, 0.02);
    g_pos_emb = Tensor({cfg.patches(), cfg.dim_enc});
    temb.init(cfg.dim_enc, rng);
    if (cfg.num_classes > 0) {
        class_emb = Tensor::randn({cfg.num_classes + 1, cfg.dim_enc}, rng, 0.02);
        g_class_emb = Tensor({cfg.num_classes + 1, cfg.dim_enc});
    }
    blocks.resize(static_cast<size_t>(cfg.enc_blocks));
    for (auto& blk : blocks) blk.init(cfg.dim_enc, cfg.heads_enc, rng);
    ln_f.init(cfg.dim_enc, true);
}

void Encoder::fwd(const Tensor& x, const std::vector<double>& t, const std::vector<int>& labels,
                  Acts& a) const {
    const int64_t B = x.dim(0), D = cfg.dim_enc, P = cfg.patches(), T = tokens();
    if (x.dim(2) != cfg.resolution || x.dim(3) != cfg.resolution)
        throw std::invalid_argument("Encoder: input resolution mismatch");
    if (static_cast<int64_t>(t.size()) != B) throw std::invalid_argument("Encoder: t size mismatch");
    a.B = B;
    a.T = T;
    a.P = P;
    a.t = t;
    a.labels = labels;
    a.c_in.resize(static_cast<size_t>(B));
    const double sd2 = diff.sigma_data * diff.sigma_data;
    for (int64_t b = 0; b < B; ++b)
        a.c_in[static_cast<size_t>(b)] = 1.0 / std::sqrt(sd2 + t[static_cast<size_t>(b)] * t[static_cast<size_t>(b)]);

    patchify(x, cfg.patch, a.patches_raw);
    for (int64_t b = 0; b < B; ++b)
        kern::scale(a.patches_raw.data() + b * P * cfg.patch_dim(), a.c_in[static_cast<size_t>(b)],
                    P * cfg.patch_dim());

    Tensor tok;
    patch_embed.fwd(a.patches_raw, tok);

    Tensor ttok;
    temb.fwd(t, ttok, a.tembc);

    const int64_t p0 = patch_row0();
    a.tokens0 = Tensor::uninit({B * T, D});
    for (int64_t b = 0; b < B; ++b) {
        double* base = a.tokens0.data() + b * T * D;
        std::memcpy(base, cls_token.data(), sizeof(double) * static_cast<size_t>(D));
        std::memcpy(base + D, ttok.data() + b * D, sizeof(double) * static_cast<size_t>(D));
        if (cfg.num_classes > 0) {
            int lab = labels.empty() ? -1 : labels[static_cast<size_t>(b)];
            const int64_t row = (lab < 0) ? cfg.num_classes : lab;
            std::memcpy(base + 2 * D, class_emb.data() + row * D,
                        sizeof(double) * static_cast<size_t>(D));
        }
        for (int64_t p = 0; p < P; ++p) {
            const double* src = tok.data() + (b * P + p) * D;
            const double* pe = pos_emb.data() + p * D;
            double* dst = base + (p0 + p) * D;
            for (int64_t i = 0; i < D; ++i) dst[i] = src[i] + pe[i];
        }
    }

    a.bc.resize(blocks.size());
    a.block_out.resize(blocks.size());
    const Tensor* cur = &a.tokens0;
    for (size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].fwd(*cur, B, T, a.block_out[i], a.bc[i]);
        cur = &a.block_out[i];
    }

    Tensor fin;
    ln_f.fwd(*cur, fin, a.lnfc);

    a.out.cls = Tensor::uninit({B, D});
    a.out.patches = Tensor::uninit({B * P, D});
    for (int64_t b = 0; b < B; ++b) {
        std::memcpy(a.out.cls.data() + b * D, fin.data() + b * T * D,
                    sizeof(double) * static_cast<size_t>(D));
        std::memcpy(a.out.patches.data() + b * P * D, fin.data() + (b * T + p0) * D,
                    sizeof(double) * static_cast<size_t>(P * D));
    }
}

void Encoder::bwd(Acts& a, const Tensor* d_cls, const Tensor* d_patches,
                  const std::vector<Tensor>* d_skips, bool accum_params, Tensor* dx) {
    const int64_t B = a.B, T = a.T, P = a.P, D = cfg.dim_enc, p0 = patch_row0();

    Tensor d_fin({B * T, D});
    for (int64_t b = 0; b < B; ++b) {
        if (d_cls)
            std::memcpy(d_fin.data() + b * T * D, d_cls->data() + b * D,
                        sizeof(double) * static_cast<size_t>(D));
        if (d_patches)
            std::memcpy(d_fin.data() + (b * T + p0) * D, d_patches->data() + b * P * D,
                        sizeof(double) * static_cast<size_t>(P * D));
    }

    Tensor d_stream;
    ln_f.bwd(a.lnfc, d_fin, d_stream, false, accum_params);

    for (int64_t i = static_cast<int64_t>(blocks.size()) - 1; i >= 0; --i) {
        if (d_skips && !(*d_skips)[static_cast<size_t>(i)].empty()) {
            const Tensor& ds = (*d_skips)[static_cast<size_t>(i)];
            for (int64_t b = 0; b < B; ++b)
                kern::add(ds.data() + b * P * D, d_stream.data() + (b * T + p0) * D, P * D);
        }
        Tensor d_prev;
        blocks[static_cast<size_t>(i)].bwd(a.bc[static_cast<size_t>(i)], B, T, d_stream, d_prev,
                                           false, accum_params);
        d_stream = std::move(d_prev);
    }

    Tensor d_ttok = Tensor::uninit({B, D});
    Tensor d_tok = Tensor::uninit({B * P, D});
    for (int64_t b = 0; b < B; ++b) {
        const double* base = d_stream.data() + b * T * D;
        if (accum_params) kern::add(base, g_cls_token.data(), D);
        std::memcpy(d_ttok.data() + b * D, base + D, sizeof(double) * static_cast<size_t>(D));
        if (cfg.num_classes > 0 && accum_params) {
            int lab = a.labels.empty() ? -1 : a.labels[static_cast<size_t>(b)];
            const int64_t row = (lab < 0) ? cfg.num_classes : lab;
            kern::add(base + 2 * D, g_class_emb.data() + row * D, D);
        }
        std::memcpy(d_tok.data() + b * P * D, base + p0 * D,
                    sizeof(double) * static_cast<size_t>(P * D));
        if (accum_params)
            for (int64_t p = 0; p < P; ++p) kern::add(base + (p0 + p) * D, g_pos_emb.data() + p * D, D);
    }

    temb.bwd(a.tembc, d_ttok, accum_params);

    if (dx) {
        Tensor d_praw;
        patch_embed.bwd(a.patches_raw, d_tok, &d_praw, false, accum_params);
        const int64_t pd = cfg.patch_dim();
        for (int64_t b = 0; b < B; ++b)
            kern::scale(d_praw.data() + b * P * pd, a.c_in[static_cast<size_t>(b)], P * pd);
        Tensor dxt;
        unpatchify(d_praw, cfg.patch, cfg.resolution, dxt);
        kern::add(dxt.data(), dx->data(), dxt.numel());
    } else {
        patch_embed.bwd(a.patches_raw, d_tok, nullptr, false, accum_params);
    }
}

void Encoder::visit(const std::string& prefix, const ParamVisitor& v) {
    patch_embed.visit(prefix + "patch_embed", v);
    v(prefix + "cls_token", cls_token, g_cls_token, false);
    v(prefix + "pos_emb", pos_emb, g_pos_emb, false);
    temb.visit(prefix + "temb", v);
    if (cfg.num_classes > 0) v(prefix + "class_emb", class_emb, g_class_emb, false);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].visit(prefix + "blocks." + std::to_string(i), v);
    ln_f.visit(prefix + "ln_f", v);
}

// ---- DecBlock -----------------------------------------------------------------------------

void DecBlock::init(int64_t d, int64_t d_enc, int64_t heads, Rng& rng) {
    ln1.init(d, false);
    ln2.init(d, false);
    attn.init(d, heads, rng);
    mlp.init(d, rng);
    adaln.init_zero(d, 6 * d, true);
    skip_proj.init(d_enc, d, rng);
}

namespace {
// Per-sample (shift, scale) modulation: y = x * (1 + scale_b) + shift_b.
void modulate(const Tensor& X, const double* mod, int64_t B, int64_t T, int64_t D, int64_t sh_off,
              int64_t sc_off, int64_t stride, Tensor& Y) {
    Y = Tensor::uninit(X.shape());
#pragma omp parallel for schedule(static) if (parallel() && B * T > 16)
    for (int64_t r = 0; r < B * T; ++r) {
        const int64_t b = r / T;
        const double* sh = mod + b * stride + sh_off;
        const double* sc = mod + b * stride + sc_off;
        const double* x = X.data() + r * D;
        double* y = Y.data() + r * D;
        for (int64_t i = 0; i < D; ++i) y[i] = x[i] * (1.0 + sc[i]) + sh[i];
    }
}

// Backward of modulate: ds_shift[b] += sum_t dY, ds_scale[b] += sum_t dY .* x,
// dX = dY .* (1 + scale_b).
void modulate_bwd(const Tensor& X, const Tensor& dY, const double* mod, double* dmod, int64_t B,
                  int64_t T, int64_t D, int64_t sh_off, int64_t sc_off, int64_t stride, Tensor& dX) {
    dX = Tensor::uninit(X.shape());
#pragma omp parallel for schedule(static) if (parallel() && B > 1)
    for (int64_t b = 0; b < B; ++b) {
        const double* sc = mod + b * stride + sc_off;
        double* dsh = dmod + b * stride + sh_off;
        double* dsc = dmod + b * stride + sc_off;
        for (int64_t t = 0; t < T; ++t) {
            const int64_t r = b * T + t;
            const double* x = X.data() + r * D;
            const double* dy = dY.data() + r * D;
            double* dxp = dX.data() + r * D;
            for (int64_t i = 0; i < D; ++i) {
                dsh[i] += dy[i];
                dsc[i] += dy[i] * x[i];
                dxp[i] = dy[i] * (1.0 + sc[i]);
            }
        }
    }
}

// h += gate_b .* branch; d_gate[b] += sum_t dH .* branch.
void gated_add(Tensor& H, const Tensor& branch, const double* mod, int64_t g_off, int64_t stride,
               int64_t B, int64_t T, int64_t D) {
#pragma omp parallel for schedule(static) if (parallel() && B * T > 16)
    for (int64_t r = 0; r < B * T; ++r) {
        const double* g = mod + (r / T) * stride + g_off;
        const double* a = branch.data() + r * D;
        double* h = H.data() + r * D;
        for (int64_t i = 0; i < D; ++i) h[i] += g[i] * a[i];
    }
}

void gated_add_bwd(const Tensor& dH, const Tensor& branch, const double* mod, double* dmod,
                   int64_t g_off, int64_t stride, int64_t B, int64_t T, int64_t D, Tensor& dbranch) {
    dbranch = Tensor::uninit(branch.shape());
#pragma omp parallel for schedule(static) if (parallel() && B > 1)
    for (int64_t b = 0; b < B; ++b) {
        const double* g = mod + b * stride + g_off;
        double* dg = dmod + b * stride + g_off;
        for (int64_t t = 0; t < T; ++t) {
            const int64_t r = b * T + t;
            const double* dh = dH.data() + r * D;
            const double* a = branch.data() + r * D;
            double* da = dbranch.data() + r * D;
            for (int64_t i = 0; i < D; ++i) {
                dg[i] += dh[i] * a[i];
                da[i] = dh[i] * g[i];
            }
        }
    }
}
}  // namespace

void DecBlock::fwd(const Tensor& H, const Tensor& skip, const Tensor& s, int64_t B, int64_t T,
                   Tensor& Y, Cache& c, double dropout_p, Rng* drop_rng) const {
    const int64_t D = attn.dim;
    c.skip = skip;
    Tensor skip_in;
    skip_proj.fwd(skip, skip_in);
    c.h_in = H;
    kern::add(skip_in.data(), c.h_in.data(), skip_in.numel());

    adaln.fwd(s, c.mod);
    const double* mod = c.mod.data();
    const int64_t stride = 6 * D;

    ln1.fwd(c.h_in, c.x1, c.ln1c);
    modulate(c.x1, mod, B, T, D, 0, D, stride, c.x1m);
    Tensor a;
    attn.fwd(c.x1m, B, T, a, c.attnc);
    if (dropout_p > 0.0 && drop_rng) {
        c.mask = Tensor(a.shape());
        const double keep = 1.0 - dropout_p;
        for (int64_t i = 0; i < a.numel(); ++i)
            c.mask[i] = drop_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
        c.a_drop = Tensor(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) c.a_drop[i] = a[i] * c.mask[i];
    } else {
        c.a_drop = std::move(a);
    }
    c.h_mid = c.h_in;
    gated_add(c.h_mid, c.a_drop, mod, 2 * D, stride, B, T, D);

    ln2.fwd(c.h_mid, c.x2, c.ln2c);
    modulate(c.x2, mod, B, T, D, 3 * D, 4 * D, stride, c.x2m);
    mlp.fwd(c.x2m, c.m_out, c.mlpc);
    Y = c.h_mid;
    gated_add(Y, c.m_out, mod, 5 * D, stride, B, T, D);
}

void DecBlock::bwd(const Cache& c, const Tensor& s, int64_t B, int64_t T, const Tensor& dY,
                   Tensor& dH, Tensor& dSkip, Tensor& dS, bool accum_params) {
    const int64_t D = attn.dim;
    const int64_t stride = 6 * D;
    Tensor dmod({B, stride});
    const double* mod = c.mod.data();

    // out = h_mid + g2 .* m
    Tensor dm;
    gated_add_bwd(dY, c.m_out, mod, dmod.data(), 5 * D, stride, B, T, D, dm);
    Tensor dx2m;
    mlp.bwd(c.mlpc, dm, dx2m, false, accum_params);
    Tensor dx2;
    modulate_bwd(c.x2, dx2m, mod, dmod.data(), B, T, D, 3 * D, 4 * D, stride, dx2);
    Tensor dh_mid = dY;
    ln2.bwd(c.ln2c, dx2, dh_mid, true, accum_params);

    // h_mid = h_in + g1 .* a_drop
    Tensor da;
    gated_add_bwd(dh_mid, c.a_drop, mod, dmod.data(), 2 * D, stride, B, T, D, da);
    if (!c.mask.empty())
        for (int64_t i = 0; i < da.numel(); ++i) da[i] *= c.mask[i];
    Tensor dx1m;
    attn.bwd(c.attnc, B, T, da, dx1m, false, accum_params);
    Tensor dx1;
    modulate_bwd(c.x1, dx1m, mod, dmod.data(), B, T, D, 0, D, stride, dx1);
    dH = dh_mid;
    ln1.bwd(c.ln1c, dx1, dH, true, accum_params);

    skip_proj.bwd(c.skip, dH, &dSkip, false, accum_params);
    Tensor ds_local;
    adaln.bwd(s, dmod, &ds_local, false, accum_params);
    kern::add(ds_local.data(), dS.data(), ds_local.numel());
}

void DecBlock::visit(const std::string& prefix, const ParamVisitor& v) {
    attn.visit(prefix + ".attn", v);
    mlp.visit(prefix + ".mlp", v);
    adaln.visit(prefix + ".adaln", v);
    skip_proj.visit(prefix + ".skip_proj", v);
}

// ---- Decoder -----------------------------------------------------------------------------

void Decoder::init(const NetworkConfig& c, Rng& rng) {
    c.validate();
    cfg = c;
    in_proj.init(cfg.dim_enc, cfg.dim_dec, rng);
    pos_emb = Tensor::randn({cfg.patches(), cfg.dim_dec}, rng, 0.02);
    g_pos_emb = Tensor({cfg.patches(), cfg.dim_dec});
    temb.init(cfg.dim_dec, rng);
    if (cfg.num_classes > 0) {
        class_emb = Tensor::randn({cfg.num_classes + 1, cfg.dim_dec}, rng, 0.02);
        g_class_emb = Tensor({cfg.num_classes + 1, cfg.dim_dec});
    }
    blocks.resize(static_cast<size_t>(cfg.dec_blocks));
    for (auto& blk : blocks) blk.init(cfg.dim_dec, cfg.dim_enc, cfg.heads_dec, rng);
    ln_f.init(cfg.dim_dec, false);
    adaln_final.init_zero(cfg.dim_dec, 2 * cfg.dim_dec, true);
    head.init(cfg.dim_dec, cfg.patch_dim(), rng);
}

void Decoder::fwd(const Tensor& patch_feats, const std::vector<Tensor>& skips,
                  const std::vector<double>& t, const std::vector<int>& labels, bool train_mode,
                  Rng* drop_rng, Tensor& F, Acts& a) const {
    const int64_t D = cfg.dim_dec, P = cfg.patches();
    const int64_t B = patch_feats.numel() / (P * cfg.dim_enc);
    if (skips.size() != blocks.size()) throw std::invalid_argument("Decoder: skip count mismatch");
    a.B = B;
    a.P = P;
    a.labels = labels;

    Tensor ttok;
    temb.fwd(t, ttok, a.tembc);
    a.c = std::move(ttok);
    if (cfg.num_classes > 0) {
        for (int64_t b = 0; b < B; ++b) {
            int lab = labels.empty() ? -1 : labels[static_cast<size_t>(b)];
            const int64_t row = (lab < 0) ? cfg.num_classes : lab;
            kern::add(class_emb.data() + row * D, a.c.data() + b * D, D);
        }
    }
    a.s = Tensor(a.c.shape());
    kern::silu_fwd(a.c.data(), a.s.data(), a.c.numel());

    a.in_x = patch_feats;
    in_proj.fwd(patch_feats, a.h0);
    for (int64_t b = 0; b < B; ++b) kern::add(pos_emb.data(), a.h0.data() + b * P * D, P * D);

    a.bc.resize(blocks.size());
    Tensor h = a.h0;
    const double p_drop = train_mode ? cfg.dec_dropout : 0.0;
    for (size_t j = 0; j < blocks.size(); ++j) {
        Tensor out;
        blocks[j].fwd(h, skips[j], a.s, B, P, out, a.bc[j], p_drop, drop_rng);
        h = std::move(out);
    }

    Tensor hf;
    ln_f.fwd(h, hf, a.lnfc);
    a.hf = hf;
    adaln_final.fwd(a.s, a.mod_f);
    modulate(a.hf, a.mod_f.data(), B, P, D, 0, D, 2 * D, a.hfm);
    head.fwd(a.hfm, a.out_patch);
    unpatchify(a.out_patch, cfg.patch, cfg.resolution, F);
}

void Decoder::bwd(Acts& a, const Tensor& dF, Tensor& d_patch_feats, std::vector<Tensor>& d_skips,
                  bool accum_params) {
    const int64_t B = a.B, P = a.P, D = cfg.dim_dec;

    Tensor d_out_patch;
    patchify(dF, cfg.patch, d_out_patch);
    Tensor d_hfm;
    head.bwd(a.hfm, d_out_patch, &d_hfm, false, accum_params);

    Tensor dmod_f({B, 2 * D});
    Tensor d_hf;
    modulate_bwd(a.hf, d_hfm, a.mod_f.data(), dmod_f.data(), B, P, D, 0, D, 2 * D, d_hf);
    Tensor dS({B, D});
    adaln_final.bwd(a.s, dmod_f, &dS, true, accum_params);

    Tensor dh;
    ln_f.bwd(a.lnfc, d_hf, dh, false, accum_params);

    d_skips.assign(blocks.size(), Tensor());
    for (int64_t j = static_cast<int64_t>(blocks.size()) - 1; j >= 0; --j) {
        Tensor dh_prev;
        blocks[static_cast<size_t>(j)].bwd(a.bc[static_cast<size_t>(j)], a.s, B, P, dh, dh_prev,
                                           d_skips[static_cast<size_t>(j)], dS, accum_params);
        dh = std::move(dh_prev);
    }

    if (accum_params)
        for (int64_t b = 0; b < B; ++b) kern::add(dh.data() + b * P * D, g_pos_emb.data(), P * D);
    in_proj.bwd(a.in_x, dh, &d_patch_feats, false, accum_params);

    Tensor dc(a.c.shape());
    kern::silu_bwd(a.c.data(), dS.data(), dc.data(), dc.numel(), false);
    if (cfg.num_classes > 0 && accum_params) {
        for (int64_t b = 0; b < B; ++b) {
            int lab = a.labels.empty() ? -1 : a.labels[static_cast<size_t>(b)];
            const int64_t row = (lab < 0) ? cfg.num_classes : lab;
            kern::add(dc.data() + b * D, g_class_emb.data() + row * D, D);
        }
    }
    temb.bwd(a.tembc, dc, accum_params);
}

void Decoder::visit(const std::string& prefix, const ParamVisitor& v) {
    in_proj.visit(prefix + "in_proj", v);
    v(prefix + "pos_emb", pos_emb, g_pos_emb, false);
    temb.visit(prefix + "temb", v);
    if (cfg.num_classes > 0) v(prefix + "class_emb", class_emb, g_class_emb, false);
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i].visit(prefix + "blocks." + std::to_string(i), v);
    adaln_final.visit(prefix + "adaln_final", v);
    head.visit(prefix + "head", v);
}

// ---- Projector ------------------------------------------------------------------------------

void Projector::init(int64_t d, Rng& rng) {
    l1.init(d, 4 * d, rng);
    l2.init(4 * d, 4 * d, rng);
    l3.init(4 * d, d, rng);
}

void Projector::fwd(const Tensor& X, Tensor& Y, Cache& c) const {
    c.x = X;
    l1.fwd(X, c.h1);
    c.a1 = Tensor(c.h1.shape());
    kern::gelu_fwd(c.h1.data(), c.a1.data(), c.h1.numel());
    l2.fwd(c.a1, c.h2);
    c.a2 = Tensor(c.h2.shape());
    kern::gelu_fwd(c.h2.data(), c.a2.data(), c.h2.numel());
    l3.fwd(c.a2, Y);
}

void Projector::bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params) {
    Tensor da2;
    l3.bwd(c.a2, dY, &da2, false, accum_params);
    Tensor dh2(c.h2.shape());
    kern::gelu_bwd(c.h2.data(), da2.data(), dh2.data(), dh2.numel(), false);
    Tensor da1;
    l2.bwd(c.a1, dh2, &da1, false, accum_params);
    Tensor dh1(c.h1.shape());
    kern::gelu_bwd(c.h1.data(), da1.data(), dh1.data(), dh1.numel(), false);
    l1.bwd(c.x, dh1, &dX, accum_dx, accum_params);
}

void Projector::visit(const std::string& prefix, const ParamVisitor& v) {
    l1.visit(prefix + "l1", v);
    l2.visit(prefix + "l2", v);
    l3.visit(prefix + "l3", v);
}

// ---- Parameter bookkeeping ---------------------------------------------------------------------

int64_t param_count(const std::vector<ParamRef>& refs) {
    int64_t n = 0;
    for (const auto& r : refs) n += r.value->numel();
    return n;
}

void zero_grads(std::vector<ParamRef>& refs) {
    for (auto& r : refs) r.grad->zero();
}

double grad_sumsq(const std::vector<ParamRef>& refs) {
    double s = 0.0;
    for (const auto& r : refs) s += kern::sumsq(r.grad->data(), r.grad->numel());
    return s;
}

void copy_params(const std::vector<ParamRef>& src, const std::vector<ParamRef>& dst) {
    if (src.size() != dst.size()) throw std::invalid_argument("copy_params: tree size mismatch");
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].name != dst[i].name || !src[i].value->same_shape(*dst[i].value))
            throw std::invalid_argument("copy_params: tree mismatch at " + src[i].name);
        kern::copy(src[i].value->data(), dst[i].value->data(), src[i].value->numel());
    }
}

void ema_update(const std::vector<ParamRef>& target, const std::vector<ParamRef>& online, double m) {
    if (m < 0.0 || m > 1.0) throw std::invalid_argument("ema_update: m out of [0,1]");
    if (target.size() != online.size()) throw std::invalid_argument("ema_update: tree size mismatch");
    for (size_t i = 0; i < target.size(); ++i) {
        if (target[i].name != online[i].name || !target[i].value->same_shape(*online[i].value))
            throw std::invalid_argument("ema_update: tree mismatch at " + target[i].name);
        double* t = target[i].value->data();
        const double* o = online[i].value->data();
        const int64_t n = target[i].value->numel();
        for (int64_t j = 0; j < n; ++j) t[j] = m * t[j] + (1.0 - m) * o[j];
    }
}

// ---- Bundle ---------------------------------------------------------------------------------

std::vector<ParamRef> ModelBundle::online_refs() {
    std::vector<ParamRef> refs = collect(enc, std::string("enc."));
    if (proj) {
        auto p = collect(*proj, std::string("proj."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    if (dec) {
        auto p = collect(*dec, std::string("dec."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    return refs;
}

std::vector<ParamRef> ModelBundle::momentum_refs() {
    std::vector<ParamRef> refs;
    if (enc_momentum) refs = collect(*enc_momentum, std::string("enc."));
    if (proj_momentum) {
        auto p = collect(*proj_momentum, std::string("proj."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    return refs;
}

std::vector<ParamRef> ModelBundle::sg_refs() {
    std::vector<ParamRef> refs;
    if (enc_sg) refs = collect(*enc_sg, std::string("enc."));
    if (dec_sg) {
        auto p = collect(*dec_sg, std::string("dec."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    return refs;
}

std::vector<ParamRef> ModelBundle::frozen_refs() {
    if (!enc_frozen) return {};
    return collect(*enc_frozen, std::string("enc."));
}

std::vector<ParamRef> ModelBundle::ema_refs() {
    std::vector<ParamRef> refs;
    if (enc_ema) refs = collect(*enc_ema, std::string("enc."));
    if (dec_ema) {
        auto p = collect(*dec_ema, std::string("dec."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    return refs;
}

void ModelBundle::refresh_sg() {
    if (enc_sg) copy_params(collect(enc, std::string("enc.")), collect(*enc_sg, std::string("enc.")));
    if (dec_sg && dec)
        copy_params(collect(*dec, std::string("dec.")), collect(*dec_sg, std::string("dec.")));
}

ModelBundle make_pretrain_bundle(const NetworkConfig& net, const sched::DiffusionConfig& diff,
                                 Rng& rng) {
    NetworkConfig cfg = net;
    cfg.num_classes = 0;  // pre-training is self-supervised
    cfg.dec_dropout = 0.0;
    ModelBundle b;
    b.net = cfg;
    b.diff = diff;
    b.stage = Stage::Pretrain;
    b.enc.init(cfg, diff, rng);
    b.proj.emplace();
    b.proj->init(cfg.dim_enc, rng);

    b.enc_momentum.emplace();
    b.enc_momentum->init(cfg, diff, rng);
    b.proj_momentum.emplace();
    b.proj_momentum->init(cfg.dim_enc, rng);
    copy_params(collect(b.enc, std::string("enc.")), collect(*b.enc_momentum, std::string("enc.")));
    copy_params(collect(*b.proj, std::string("proj.")),
                collect(*b.proj_momentum, std::string("proj.")));

    b.enc_sg.emplace();
    b.enc_sg->init(cfg, diff, rng);
    b.refresh_sg();
    return b;
}

namespace {
// Copy every tensor whose name exists in both trees (used when the conditional
// fine-tuning encoder grows a class-embedding table the checkpoint lacks).
void copy_overlapping(const std::vector<ParamRef>& src, const std::vector<ParamRef>& dst) {
    std::map<std::string, const ParamRef*> by_name;
    for (const auto& r : src) by_name[r.name] = &r;
    for (const auto& d : dst) {
        auto it = by_name.find(d.name);
        if (it == by_name.end()) continue;
        if (!it->second->value->same_shape(*d.value))
            throw std::invalid_argument("copy_overlapping: shape mismatch at " + d.name);
        kern::copy(it->second->value->data(), d.value->data(), d.value->numel());
    }
}
}  // namespace

Encoder freeze_copy(const Encoder& src) {
    Encoder dst;
    NetworkConfig cfg = src.cfg;
    cfg.num_classes = 0;
    Rng dummy(0);
    dst.init(cfg, src.diff, dummy);
    copy_overlapping(collect(const_cast<Encoder&>(src), std::string("enc.")),
                     collect(dst, std::string("enc.")));
    return dst;
}

ModelBundle make_finetune_bundle(const NetworkConfig& net, const sched::DiffusionConfig& diff,
                                 Stage stage, const Encoder* pretrained, Rng& rng) {
    if (stage == Stage::Pretrain) throw std::invalid_argument("make_finetune_bundle: wrong stage");
    NetworkConfig cfg = net;
    if (stage != Stage::FinetuneCM) cfg.dec_dropout = 0.0;
    ModelBundle b;
    b.net = cfg;
    b.diff = diff;
    b.stage = stage;
    b.enc.init(cfg, diff, rng);
    if (pretrained)
        copy_overlapping(collect(const_cast<Encoder&>(*pretrained), std::string("enc.")),
                         collect(b.enc, std::string("enc.")));
    b.dec.emplace();
    b.dec->init(cfg, rng);

    if (stage == Stage::FinetuneCM) {
        b.enc_sg.emplace();
        b.enc_sg->init(cfg, diff, rng);
        b.dec_sg.emplace();
        b.dec_sg->init(cfg, rng);
        b.refresh_sg();
        // Frozen copy of the encoder exactly as it enters fine-tuning.
        b.enc_frozen = freeze_copy(b.enc);
    }

    b.enc_ema.emplace();
    b.enc_ema->init(cfg, diff, rng);
    b.dec_ema.emplace();
    b.dec_ema->init(cfg, rng);
    copy_params(collect(b.enc, std::string("enc.")), collect(*b.enc_ema, std::string("enc.")));
    copy_params(collect(*b.dec, std::string("dec.")), collect(*b.dec_ema, std::string("dec.")));
    return b;
}

// ---- Denoiser glue -----------------------------------------------------------------------------

Tensor denoise_fwd(const Encoder& enc, const Decoder& dec, const sched::DiffusionConfig& diff,
                   const Tensor& x, const std::vector<double>& t, const std::vector<int>& labels,
                   bool train_mode, Rng* drop_rng, DenoiseCache* cache) {
    DenoiseCache local;
    DenoiseCache& c = cache ? *cache : local;
    c.x = x;
    c.t = t;
    const int64_t B = x.dim(0);

    enc.fwd(x, t, labels, c.enc);

    const int64_t P = enc.cfg.patches(), De = enc.cfg.dim_enc, p0 = enc.patch_row0();
    const int64_t nb = static_cast<int64_t>(dec.blocks.size());
    c.skips.assign(static_cast<size_t>(nb), Tensor());
    for (int64_t j = 0; j < nb; ++j) {
        const int64_t i = enc.cfg.enc_blocks - 1 - j;  // mirror pairing
        const Tensor& stream = c.enc.block_out[static_cast<size_t>(i)];
        Tensor& s = c.skips[static_cast<size_t>(j)];
        s = Tensor::uninit({B * P, De});
        for (int64_t b = 0; b < B; ++b)
            std::memcpy(s.data() + b * P * De, stream.data() + (b * c.enc.T + p0) * De,
                        sizeof(double) * static_cast<size_t>(P * De));
    }

    Tensor F;
    dec.fwd(c.enc.out.patches, c.skips, t, labels, train_mode, drop_rng, F, c.dec);
    c.F = F;

    c.c_skip.resize(static_cast<size_t>(B));
    c.c_out.resize(static_cast<size_t>(B));
    Tensor f = x;
    const int64_t chw = x.numel() / B;
    for (int64_t b = 0; b < B; ++b) {
        const auto [cs, co] = sched::cskip_cout(t[static_cast<size_t>(b)], diff);
        c.c_skip[static_cast<size_t>(b)] = cs;
        c.c_out[static_cast<size_t>(b)] = co;
        double* fp = f.data() + b * chw;
        const double* xp = x.data() + b * chw;
        const double* Fp = F.data() + b * chw;
        for (int64_t i = 0; i < chw; ++i) fp[i] = cs * xp[i] + co * Fp[i];
    }
    return f;
}

void denoise_bwd(Encoder& enc, Decoder& dec, DenoiseCache& cache, const Tensor& df,
                 bool accum_params, Tensor* dx) {
    const int64_t B = cache.x.dim(0);
    const int64_t chw = cache.x.numel() / B;

    Tensor dF = Tensor::uninit(cache.F.shape());
    for (int64_t b = 0; b < B; ++b) {
        const double co = cache.c_out[static_cast<size_t>(b)];
        const double* d = df.data() + b * chw;
        double* o = dF.data() + b * chw;
        for (int64_t i = 0; i < chw; ++i) o[i] = co * d[i];
    }

    Tensor d_patch_feats;
    std::vector<Tensor> d_skips_dec;
    dec.bwd(cache.dec, dF, d_patch_feats, d_skips_dec, accum_params);

    // Map decoder skip grads back to encoder block indices.
    std::vector<Tensor> d_skips_enc(static_cast<size_t>(enc.cfg.enc_blocks));
    for (size_t j = 0; j < d_skips_dec.size(); ++j) {
        const int64_t i = enc.cfg.enc_blocks - 1 - static_cast<int64_t>(j);
        d_skips_enc[static_cast<size_t>(i)] = std::move(d_skips_dec[j]);
    }

    enc.bwd(cache.enc, nullptr, &d_patch_feats, &d_skips_enc, accum_params, dx);

    if (dx) {
        for (int64_t b = 0; b < B; ++b) {
            const double cs = cache.c_skip[static_cast<size_t>(b)];
            const double* d = df.data() + b * chw;
            double* o = dx->data() + b * chw;
            for (int64_t i = 0; i < chw; ++i) o[i] += cs * d[i];
        }
    }
}

}  // namespace epg::nn
