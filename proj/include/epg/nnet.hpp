#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "epg/core/rng.hpp"
#include "epg/core/tensor.hpp"
#include "epg/schedules.hpp"

namespace epg::nn {

struct NetworkConfig {
    int64_t enc_blocks = 4, dec_blocks = 4;
    int64_t dim_enc = 192, dim_dec = 192;
    int64_t heads_enc = 3, heads_dec = 3;
    int64_t patch = 4;
    int64_t resolution = 32;
    int64_t num_classes = 0;   // conditional iff > 0
    double dec_dropout = 0.0;  // attention-branch dropout in the decoder

    int64_t patches() const {
        const int64_t side = resolution / patch;
        return side * side;
    }
    int64_t patch_dim() const { return patch * patch * 3; }
    void validate() const;
};

// Every trainable tensor is visited with a stable name, its gradient buffer,
// and whether it participates in weight decay.
using ParamVisitor =
    std::function<void(const std::string& name, Tensor& value, Tensor& grad, bool decay)>;

struct ParamRef {
    std::string name;
    Tensor* value;
    Tensor* grad;
    bool decay;
};

// ---- Layers -----------------------------------------------------------------

struct Linear {
    Tensor w, b, gw, gb;  // w: [in, out]
    bool has_bias = true;
    bool decay_w = true;

    void init(int64_t in, int64_t out, Rng& rng, bool bias = true);
    void init_zero(int64_t in, int64_t out, bool bias = true);
    int64_t in() const { return w.dim(0); }
    int64_t out() const { return w.dim(1); }

    void fwd(const Tensor& X, Tensor& Y) const;  // Y [rows,out] = X [rows,in] @ w + b
    // dX (+)= dY @ w^T when dX non-null; gw/gb accumulated when accum_params.
    void bwd(const Tensor& X, const Tensor& dY, Tensor* dX, bool accum_dx, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct LayerNorm {
    Tensor g, b, gg, gb;
    bool affine = true;
    int64_t dim = 0;
    double eps = 1e-6;

    struct Cache {
        Tensor x, mean, rstd;
    };

    void init(int64_t d, bool affine_);
    void fwd(const Tensor& X, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct Attention {
    Linear qkv;   // D -> 3D
    Linear proj;  // D -> D
    int64_t heads = 0, dim = 0;

    struct Cache {
        Tensor x;      // [B*T, D]
        Tensor qkv_o;  // [B*T, 3D]
        Tensor probs;  // [B, heads, T, T]
        Tensor ctx;    // [B*T, D]
    };

    void init(int64_t d, int64_t h, Rng& rng);
    void fwd(const Tensor& X, int64_t B, int64_t T, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, int64_t B, int64_t T, const Tensor& dY, Tensor& dX, bool accum_dx,
             bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct Mlp {
    Linear fc1, fc2;  // D -> 4D -> D, GELU between

    struct Cache {
        Tensor x, h1, a1;
    };

    void init(int64_t d, Rng& rng);
    void fwd(const Tensor& X, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Pre-LN transformer block.
struct EncBlock {
    LayerNorm ln1, ln2;
    Attention attn;
    Mlp mlp;

    struct Cache {
        LayerNorm::Cache ln1c, ln2c;
        Attention::Cache attnc;
        Mlp::Cache mlpc;
        Tensor h_mid;  // x + attn branch
    };

    void init(int64_t d, int64_t heads, Rng& rng);
    void fwd(const Tensor& X, int64_t B, int64_t T, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, int64_t B, int64_t T, const Tensor& dY, Tensor& dX, bool accum_dx,
             bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// Sinusoidal features of log t followed by a learned two-layer projection.
struct TimeEmbed {
    Linear fc1, fc2;
    int64_t dim = 0;

    struct Cache {
        Tensor sinus, h1, a1;
    };

    void init(int64_t d, Rng& rng);
    // t per sample -> [B, D]
    void fwd(const std::vector<double>& t, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, const Tensor& dY, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);

    static void sinusoidal(const std::vector<double>& t, int64_t dim, Tensor& out);
};

// ---- Encoder ------------------------------------------------------------------

struct EncoderOutput {
    Tensor cls;      // [B, D]
    Tensor patches;  // [B*P, D]
};

struct Encoder {
    NetworkConfig cfg;
    sched::DiffusionConfig diff;

    Linear patch_embed;
    Tensor cls_token, g_cls_token;  // [D]
    Tensor pos_emb, g_pos_emb;      // [P, D]
    TimeEmbed temb;
    Tensor class_emb, g_class_emb;  // [num_classes + 1, D] when conditional
    std::vector<EncBlock> blocks;
    LayerNorm ln_f;

    struct Acts {
        int64_t B = 0, T = 0, P = 0;
        std::vector<double> t, c_in;
        std::vector<int> labels;
        Tensor patches_raw;  // [B*P, patch_dim], already input-scaled
        TimeEmbed::Cache tembc;
        Tensor tokens0;                   // [B*T, D]
        std::vector<EncBlock::Cache> bc;  // per block
        std::vector<Tensor> block_out;    // stream after each block
        LayerNorm::Cache lnfc;
        EncoderOutput out;
    };

    void init(const NetworkConfig& c, const sched::DiffusionConfig& d, Rng& rng);
    int64_t tokens() const { return 2 + (cfg.num_classes > 0 ? 1 : 0) + cfg.patches(); }
    int64_t patch_row0() const { return 2 + (cfg.num_classes > 0 ? 1 : 0); }

    // labels[i] in [0, num_classes), or -1 for the null class; ignored when
    // the encoder is unconditional.
    void fwd(const Tensor& x, const std::vector<double>& t, const std::vector<int>& labels,
             Acts& a) const;

    // d_cls [B,D] and/or d_patches [B*P,D] seed the head gradients; d_skips
    // optionally adds one [B*P, D] gradient per block output (patch rows).
    // dx, when non-null, receives the input-image gradient.
    void bwd(Acts& a, const Tensor* d_cls, const Tensor* d_patches,
             const std::vector<Tensor>* d_skips, bool accum_params, Tensor* dx);

    void visit(const std::string& prefix, const ParamVisitor& v);
};

// ---- Decoder ------------------------------------------------------------------

// DiT-style block: adaLN-Zero modulation of attention and MLP branches, with
// an un-gated skip injection from the mirrored encoder block.
struct DecBlock {
    LayerNorm ln1, ln2;  // non-affine
    Attention attn;
    Mlp mlp;
    Linear adaln;      // D -> 6D, zero-initialized
    Linear skip_proj;  // D_enc -> D

    struct Cache {
        Tensor h_in;  // stream after skip injection
        Tensor skip;  // [B*P, D_enc]
        Tensor mod;   // [B, 6D]
        LayerNorm::Cache ln1c, ln2c;
        Tensor x1, x1m, x2, x2m;
        Attention::Cache attnc;
        Mlp::Cache mlpc;
        Tensor a_drop;  // attention branch after dropout
        Tensor mask;    // dropout mask (empty when inactive)
        Tensor m_out;   // mlp branch
        Tensor h_mid;
    };

    void init(int64_t d, int64_t d_enc, int64_t heads, Rng& rng);
    void fwd(const Tensor& H, const Tensor& skip, const Tensor& s, int64_t B, int64_t T, Tensor& Y,
             Cache& c, double dropout_p, Rng* drop_rng) const;
    void bwd(const Cache& c, const Tensor& s, int64_t B, int64_t T, const Tensor& dY, Tensor& dH,
             Tensor& dSkip, Tensor& dS, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

struct Decoder {
    NetworkConfig cfg;

    Linear in_proj;  // D_enc -> D_dec
    Tensor pos_emb, g_pos_emb;
    TimeEmbed temb;
    Tensor class_emb, g_class_emb;
    std::vector<DecBlock> blocks;
    LayerNorm ln_f;      // non-affine
    Linear adaln_final;  // D -> 2D, zero-initialized
    Linear head;         // D -> patch_dim

    struct Acts {
        int64_t B = 0, P = 0;
        std::vector<int> labels;
        TimeEmbed::Cache tembc;
        Tensor c, s;  // conditioning vector and silu(c)
        Tensor in_x;  // input patch features
        Tensor h0;    // stream entering block 0
        std::vector<DecBlock::Cache> bc;
        LayerNorm::Cache lnfc;
        Tensor mod_f;      // [B, 2D]
        Tensor hf, hfm;    // final LN output and its modulated version
        Tensor out_patch;  // [B*P, patch_dim]
    };

    void init(const NetworkConfig& c, Rng& rng);

    // patch_feats: [B*P, D_enc]; skips: dec_blocks entries of [B*P, D_enc].
    void fwd(const Tensor& patch_feats, const std::vector<Tensor>& skips,
             const std::vector<double>& t, const std::vector<int>& labels, bool train_mode,
             Rng* drop_rng, Tensor& F, Acts& a) const;

    // dF: [B, 3, H, W]; produces d_patch_feats and per-block d_skips.
    void bwd(Acts& a, const Tensor& dF, Tensor& d_patch_feats, std::vector<Tensor>& d_skips,
             bool accum_params);

    void visit(const std::string& prefix, const ParamVisitor& v);
};

// ---- Projector -----------------------------------------------------------------

struct Projector {
    Linear l1, l2, l3;  // D -> 4D -> 4D -> D

    struct Cache {
        Tensor x, h1, a1, h2, a2;
    };

    void init(int64_t d, Rng& rng);
    void fwd(const Tensor& X, Tensor& Y, Cache& c) const;
    void bwd(const Cache& c, const Tensor& dY, Tensor& dX, bool accum_dx, bool accum_params);
    void visit(const std::string& prefix, const ParamVisitor& v);
};

// ---- Patch plumbing --------------------------------------------------------------

// [B,3,H,W] -> [B*P, patch*patch*3]; channel-major within a patch.
void patchify(const Tensor& x, int64_t patch, Tensor& out);
// Exact inverse of patchify.
void unpatchify(const Tensor& tokens, int64_t patch, int64_t resolution, Tensor& out);

// ---- Parameter bookkeeping --------------------------------------------------------

template <typename M>
std::vector<ParamRef> collect(M& module, const std::string& prefix = "") {
    std::vector<ParamRef> refs;
    module.visit(prefix, [&](const std::string& name, Tensor& p, Tensor& g, bool decay) {
        refs.push_back({name, &p, &g, decay});
    });
    return refs;
}

int64_t param_count(const std::vector<ParamRef>& refs);
void zero_grads(std::vector<ParamRef>& refs);
double grad_sumsq(const std::vector<ParamRef>& refs);
// Congruence (names + shapes) is checked; throws invalid_argument on mismatch.
void copy_params(const std::vector<ParamRef>& src, const std::vector<ParamRef>& dst);
void ema_update(const std::vector<ParamRef>& target, const std::vector<ParamRef>& online, double m);

// ---- Bundle -----------------------------------------------------------------------

enum class Stage { Pretrain, FinetuneDM, FinetuneCM };

// Online parameters plus every teacher view a stage needs. Momentum / shadow /
// frozen sets are never touched by the optimizer; shadow is re-snapshotted from
// the online weights by the step functions.
struct ModelBundle {
    NetworkConfig net;
    sched::DiffusionConfig diff;
    Stage stage = Stage::Pretrain;

    Encoder enc;
    std::optional<Projector> proj;
    std::optional<Decoder> dec;

    std::optional<Encoder> enc_momentum;
    std::optional<Projector> proj_momentum;

    std::optional<Encoder> enc_sg;
    std::optional<Decoder> dec_sg;

    std::optional<Encoder> enc_frozen;  // unconditional copy for the auxiliary loss

    std::optional<Encoder> enc_ema;
    std::optional<Decoder> dec_ema;

    std::vector<ParamRef> online_refs();
    std::vector<ParamRef> momentum_refs();
    std::vector<ParamRef> sg_refs();
    std::vector<ParamRef> frozen_refs();
    std::vector<ParamRef> ema_refs();

    // Copies current online weights into the stop-grad shadow.
    void refresh_sg();
};

ModelBundle make_pretrain_bundle(const NetworkConfig& net, const sched::DiffusionConfig& diff,
                                 Rng& rng);
// Fine-tuning bundle: encoder initialized from `pretrained_est` when provided
// (projector dropped), decoder freshly initialized. CM installs the frozen
// copy of the (pre-trained or scratch) encoder.
ModelBundle make_finetune_bundle(const NetworkConfig& net, const sched::DiffusionConfig& diff,
                                 Stage stage, const Encoder* pretrained, Rng& rng);

// Unconditional deep copy of an encoder (drops any class-token machinery).
Encoder freeze_copy(const Encoder& src);

// ---- Denoiser glue ------------------------------------------------------------------

struct DenoiseCache {
    Encoder::Acts enc;
    Decoder::Acts dec;
    Tensor x;
    std::vector<double> t, c_skip, c_out;
    Tensor F;
    std::vector<Tensor> skips;
};

// f = c_skip(t) x + c_out(t) F(x, t); returns x exactly at t = 0.
Tensor denoise_fwd(const Encoder& enc, const Decoder& dec, const sched::DiffusionConfig& diff,
                   const Tensor& x, const std::vector<double>& t, const std::vector<int>& labels,
                   bool train_mode, Rng* drop_rng, DenoiseCache* cache);

// df: gradient wrt f. Accumulates parameter grads when accum_params; adds the
// input-image gradient into *dx when non-null.
void denoise_bwd(Encoder& enc, Decoder& dec, DenoiseCache& cache, const Tensor& df,
                 bool accum_params, Tensor* dx);

}  // namespace epg::nn
