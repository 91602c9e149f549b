#include "promptseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace promptseg {

void ModelConfig::validate() const {
    if (embed_dim % num_heads != 0)
        throw ConfigError("embed_dim must be divisible by num_heads");
    if (embed_dim % 4 != 0) throw ConfigError("embed_dim must be divisible by 4");
    if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (mlp_depth < 1) throw ConfigError("mlp_depth must be >= 1");
    if (image_height % 8 != 0 || image_width % 8 != 0 || image_height < 16 ||
        image_width < 16)
        throw ConfigError("image size must be a multiple of 8 and at least 16");
    if (mask_height != image_height / 4 || mask_width != image_width / 4)
        throw ConfigError("mask resolution must be image size / 4");
    if (min_prompts < 1) throw ConfigError("min_prompts must be >= 1");
}

int prompt_count_for(int num_classes, int floor) {
    return std::max(num_classes, floor);
}

namespace {

int chan1(const ModelConfig& cfg) { return std::max(2, cfg.embed_dim / 4); }
int chan2(const ModelConfig& cfg) { return std::max(4, cfg.embed_dim / 2); }

enum class Init { trunc_normal, zeros, ones };

ParamPtr make_param(ModelState& st, const std::string& name, const std::string& group,
                    int rows, int cols, Rng& rng, Init init) {
    auto p = std::make_shared<Param>();
    p->name = name;
    p->group = group;
    p->trainable = true;
    p->value = Mat(rows, cols);
    switch (init) {
        case Init::trunc_normal:
            for (int c = 0; c < cols; ++c)
                for (int r = 0; r < rows; ++r) p->value(r, c) = rng.trunc_normal(0.02);
            break;
        case Init::zeros:
            p->value.setZero();
            break;
        case Init::ones:
            p->value.setOnes();
            break;
    }
    st.registry.push_back(p);
    return p;
}

AttnParams make_attn(ModelState& st, const std::string& prefix, int d, Rng& rng) {
    AttnParams a;
    a.wq = make_param(st, prefix + "/wq", "transformer_decoder", d, d, rng, Init::trunc_normal);
    a.bq = make_param(st, prefix + "/bq", "transformer_decoder", 1, d, rng, Init::zeros);
    a.wk = make_param(st, prefix + "/wk", "transformer_decoder", d, d, rng, Init::trunc_normal);
    a.bk = make_param(st, prefix + "/bk", "transformer_decoder", 1, d, rng, Init::zeros);
    a.wv = make_param(st, prefix + "/wv", "transformer_decoder", d, d, rng, Init::trunc_normal);
    a.bv = make_param(st, prefix + "/bv", "transformer_decoder", 1, d, rng, Init::zeros);
    a.wo = make_param(st, prefix + "/wo", "transformer_decoder", d, d, rng, Init::trunc_normal);
    a.bo = make_param(st, prefix + "/bo", "transformer_decoder", 1, d, rng, Init::zeros);
    return a;
}

Mat sinusoidal_posenc(const ModelConfig& cfg) {
    const int th = cfg.image_height / 8, tw = cfg.image_width / 8;
    const int d = cfg.embed_dim, quarter = d / 4;
    Mat pe(th * tw, d);
    for (int ty = 0; ty < th; ++ty)
        for (int tx = 0; tx < tw; ++tx) {
            int row = ty * tw + tx;
            for (int i = 0; i < quarter; ++i) {
                double freq = std::pow(10000.0, -2.0 * i / (d / 2.0));
                pe(row, 2 * i) = std::sin(ty * freq);
                pe(row, 2 * i + 1) = std::cos(ty * freq);
                pe(row, d / 2 + 2 * i) = std::sin(tx * freq);
                pe(row, d / 2 + 2 * i + 1) = std::cos(tx * freq);
            }
        }
    return pe;
}

void add_prompt_and_head(ModelState& st, int step, const std::vector<int>& classes,
                         Rng& rng) {
    const ModelConfig& cfg = st.cfg;
    const int n = prompt_count_for(static_cast<int>(classes.size()), cfg.min_prompts);
    const std::string pg = "prompt_t" + std::to_string(step);
    const std::string hg = "head_t" + std::to_string(step);

    PromptSet ps;
    ps.step = step;
    ps.local_classes = classes;
    const int blocks = cfg.prompt_mode == PromptMode::deep ? cfg.num_layers : 1;
    for (int l = 0; l < blocks; ++l)
        ps.blocks.push_back(make_param(st, pg + "/q" + std::to_string(l), pg, n,
                                       cfg.embed_dim, rng, Init::trunc_normal));
    st.prompt_sets.push_back(std::move(ps));

    StepHead head;
    head.step = step;
    int in = cfg.embed_dim;
    for (int l = 0; l < cfg.mlp_depth; ++l) {
        head.weights.push_back(make_param(st, hg + "/w" + std::to_string(l), hg, in,
                                          cfg.mlp_hidden, rng, Init::trunc_normal));
        head.biases.push_back(make_param(st, hg + "/b" + std::to_string(l), hg, 1,
                                         cfg.mlp_hidden, rng, Init::zeros));
        in = cfg.mlp_hidden;
    }
    head.weights.push_back(make_param(st, hg + "/w_out", hg, in,
                                      static_cast<int>(classes.size()), rng,
                                      Init::trunc_normal));
    head.biases.push_back(make_param(st, hg + "/b_out", hg, 1,
                                     static_cast<int>(classes.size()), rng, Init::zeros));
    st.heads.push_back(std::move(head));
}

}  // namespace

ModelState init_model(const ModelConfig& cfg, const ClassCatalog& catalog,
                      const TaskProtocol& protocol, uint64_t seed) {
    cfg.validate();
    if (protocol.num_steps() < 1) throw ProtocolError("protocol has no steps");

    ModelState st;
    st.cfg = cfg;
    st.catalog = catalog;
    Rng rng(seed);

    const int d = cfg.embed_dim, pe = cfg.pixel_embed_dim;
    const int c1 = chan1(cfg), c2 = chan2(cfg);
    st.conv1_w = make_param(st, "backbone/conv1_w", "backbone", c1, 3 * 9, rng, Init::trunc_normal);
    st.conv1_b = make_param(st, "backbone/conv1_b", "backbone", c1, 1, rng, Init::zeros);
    st.conv2_w = make_param(st, "backbone/conv2_w", "backbone", c2, c1 * 9, rng, Init::trunc_normal);
    st.conv2_b = make_param(st, "backbone/conv2_b", "backbone", c2, 1, rng, Init::zeros);
    st.conv3_w = make_param(st, "backbone/conv3_w", "backbone", d, c2 * 9, rng, Init::trunc_normal);
    st.conv3_b = make_param(st, "backbone/conv3_b", "backbone", d, 1, rng, Init::zeros);

    st.px_proj_w = make_param(st, "pixel_decoder/proj_w", "pixel_decoder", pe, d, rng, Init::trunc_normal);
    st.px_proj_b = make_param(st, "pixel_decoder/proj_b", "pixel_decoder", pe, 1, rng, Init::zeros);
    st.px_lat_w = make_param(st, "pixel_decoder/lat_w", "pixel_decoder", pe, c2, rng, Init::trunc_normal);
    st.px_lat_b = make_param(st, "pixel_decoder/lat_b", "pixel_decoder", pe, 1, rng, Init::zeros);
    st.px_out_w = make_param(st, "pixel_decoder/out_w", "pixel_decoder", pe, pe * 9, rng, Init::trunc_normal);
    st.px_out_b = make_param(st, "pixel_decoder/out_b", "pixel_decoder", pe, 1, rng, Init::zeros);

    for (int l = 0; l < cfg.num_layers; ++l) {
        const std::string prefix = "transformer_decoder/layer" + std::to_string(l);
        LayerParams lp;
        lp.cross = make_attn(st, prefix + "/cross", d, rng);
        lp.self = make_attn(st, prefix + "/self", d, rng);
        lp.ffn_w1 = make_param(st, prefix + "/ffn_w1", "transformer_decoder", d, 4 * d, rng, Init::trunc_normal);
        lp.ffn_b1 = make_param(st, prefix + "/ffn_b1", "transformer_decoder", 1, 4 * d, rng, Init::zeros);
        lp.ffn_w2 = make_param(st, prefix + "/ffn_w2", "transformer_decoder", 4 * d, d, rng, Init::trunc_normal);
        lp.ffn_b2 = make_param(st, prefix + "/ffn_b2", "transformer_decoder", 1, d, rng, Init::zeros);
        lp.ln1_g = make_param(st, prefix + "/ln1_g", "transformer_decoder", 1, d, rng, Init::ones);
        lp.ln1_b = make_param(st, prefix + "/ln1_b", "transformer_decoder", 1, d, rng, Init::zeros);
        lp.ln2_g = make_param(st, prefix + "/ln2_g", "transformer_decoder", 1, d, rng, Init::ones);
        lp.ln2_b = make_param(st, prefix + "/ln2_b", "transformer_decoder", 1, d, rng, Init::zeros);
        lp.ln3_g = make_param(st, prefix + "/ln3_g", "transformer_decoder", 1, d, rng, Init::ones);
        lp.ln3_b = make_param(st, prefix + "/ln3_b", "transformer_decoder", 1, d, rng, Init::zeros);
        st.layers.push_back(std::move(lp));
    }
    st.final_ln_g = make_param(st, "transformer_decoder/final_ln_g", "transformer_decoder", 1, d, rng, Init::ones);
    st.final_ln_b = make_param(st, "transformer_decoder/final_ln_b", "transformer_decoder", 1, d, rng, Init::zeros);
    st.mask_w1 = make_param(st, "transformer_decoder/mask_w1", "transformer_decoder", d, d, rng, Init::trunc_normal);
    st.mask_b1 = make_param(st, "transformer_decoder/mask_b1", "transformer_decoder", 1, d, rng, Init::zeros);
    st.mask_w2 = make_param(st, "transformer_decoder/mask_w2", "transformer_decoder", d, d, rng, Init::trunc_normal);
    st.mask_b2 = make_param(st, "transformer_decoder/mask_b2", "transformer_decoder", 1, d, rng, Init::zeros);
    st.mask_w3 = make_param(st, "transformer_decoder/mask_w3", "transformer_decoder", d, pe, rng, Init::trunc_normal);
    st.mask_b3 = make_param(st, "transformer_decoder/mask_b3", "transformer_decoder", 1, pe, rng, Init::zeros);

    st.posenc = sinusoidal_posenc(cfg);
    add_prompt_and_head(st, 1, protocol.steps[0], rng);
    return st;
}

void add_step(ModelState& state, const std::vector<int>& new_classes, uint64_t seed) {
    std::set<int> existing;
    for (const auto& ps : state.prompt_sets)
        existing.insert(ps.local_classes.begin(), ps.local_classes.end());
    for (int c : new_classes)
        if (existing.count(c))
            throw ProtocolError("class " + std::to_string(c) +
                                " already owned by an earlier step");
    for (auto& p : state.registry) p->trainable = false;
    Rng rng(seed);
    add_prompt_and_head(state, state.num_steps() + 1, new_classes, rng);
}

void ModelState::set_group_trainable(const std::string& group, bool trainable) {
    for (auto& p : registry)
        if (p->group == group) p->trainable = trainable;
}

std::vector<std::string> ModelState::groups() const {
    std::vector<std::string> out;
    for (const auto& p : registry)
        if (out.empty() || out.back() != p->group) out.push_back(p->group);
    return out;
}

ModelState ModelState::clone() const {
    ModelState c = *this;  // copies shared_ptrs; now deep-copy every param
    std::map<Param*, ParamPtr> remap;
    c.registry.clear();
    for (const auto& p : registry) {
        auto np = std::make_shared<Param>(*p);
        remap[p.get()] = np;
        c.registry.push_back(np);
    }
    auto r = [&](ParamPtr& p) { p = remap.at(p.get()); };
    r(c.conv1_w); r(c.conv1_b); r(c.conv2_w); r(c.conv2_b); r(c.conv3_w); r(c.conv3_b);
    r(c.px_proj_w); r(c.px_proj_b); r(c.px_lat_w); r(c.px_lat_b); r(c.px_out_w); r(c.px_out_b);
    for (auto& lp : c.layers) {
        for (AttnParams* a : {&lp.cross, &lp.self}) {
            r(a->wq); r(a->bq); r(a->wk); r(a->bk);
            r(a->wv); r(a->bv); r(a->wo); r(a->bo);
        }
        r(lp.ffn_w1); r(lp.ffn_b1); r(lp.ffn_w2); r(lp.ffn_b2);
        r(lp.ln1_g); r(lp.ln1_b); r(lp.ln2_g); r(lp.ln2_b); r(lp.ln3_g); r(lp.ln3_b);
    }
    r(c.final_ln_g); r(c.final_ln_b);
    r(c.mask_w1); r(c.mask_b1); r(c.mask_w2); r(c.mask_b2); r(c.mask_w3); r(c.mask_b3);
    for (auto& ps : c.prompt_sets)
        for (auto& b : ps.blocks) r(b);
    for (auto& h : c.heads) {
        for (auto& w : h.weights) r(w);
        for (auto& b : h.biases) r(b);
    }
    return c;
}

// ---- differentiable forward -----------------------------------------------

Val ForwardGraph::use(const ParamPtr& p) {
    for (const auto& [q, v] : bindings_)
        if (q == p.get()) return v;
    Val v = tape.leaf(p->value, grad_enabled_ && p->trainable);
    bindings_.emplace_back(p.get(), v);
    return v;
}

namespace {

Val linear(ForwardGraph& g, Val x, const ParamPtr& w, const ParamPtr& b) {
    return g.tape.add_rowvec(g.tape.matmul(x, g.use(w)), g.use(b));
}

Val layer_norm(ForwardGraph& g, Val x, const ParamPtr& gain, const ParamPtr& bias) {
    return g.tape.add_rowvec(g.tape.mul_rowvec(g.tape.layernorm_rows(x), g.use(gain)),
                             g.use(bias));
}

Val mha(ForwardGraph& g, Val q_in, Val kv_in, const AttnParams& p, int heads,
        bool is_self) {
    Tape& t = g.tape;
    Val q = linear(g, q_in, p.wq, p.bq);
    Val k = linear(g, kv_in, p.wk, p.bk);
    Val v = linear(g, kv_in, p.wv, p.bv);
    const int d = static_cast<int>(t.value(q).cols());
    const int dh = d / heads;
    const long long nq = t.value(q).rows(), nk = t.value(k).rows();
    Val out;
    for (int h = 0; h < heads; ++h) {
        Val qh = t.slice_cols(q, h * dh, dh);
        Val kh = t.slice_cols(k, h * dh, dh);
        Val vh = t.slice_cols(v, h * dh, dh);
        Val scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
        if (is_self) t.stats.attn_pairwise_madds += 2 * nq * nk * dh;
        Val att = t.matmul(t.softmax_rows(scores), vh);
        out = (h == 0) ? att : t.concat_cols(out, att);
    }
    return linear(g, out, p.wo, p.bo);
}

}  // namespace

EncodedG encode_g(ForwardGraph& g, const ModelState& state, const Mat& image) {
    const ModelConfig& cfg = state.cfg;
    const int H = cfg.image_height, W = cfg.image_width;
    if (image.rows() != 3 || image.cols() != static_cast<Eigen::Index>(H) * W)
        throw InputError("encode: image must be 3 x " + std::to_string(H * W));
    Tape& t = g.tape;
    const int c1 = chan1(cfg), c2 = chan2(cfg), d = cfg.embed_dim, pe = cfg.pixel_embed_dim;

    Val x0 = t.constant(image);
    Val x1 = t.gelu(t.conv2d(x0, g.use(state.conv1_w), g.use(state.conv1_b), 3, H, W, c1, 3, 2, 1));
    Val x2 = t.gelu(t.conv2d(x1, g.use(state.conv2_w), g.use(state.conv2_b), c1, H / 2, W / 2, c2, 3, 2, 1));
    Val x3 = t.gelu(t.conv2d(x2, g.use(state.conv3_w), g.use(state.conv3_b), c2, H / 4, W / 4, d, 3, 2, 1));

    Val tokens = t.add(t.transpose(x3), t.constant(state.posenc));

    Val p = t.conv2d(x3, g.use(state.px_proj_w), g.use(state.px_proj_b), d, H / 8, W / 8, pe, 1, 1, 0);
    p = t.upsample2x(p, pe, H / 8, W / 8);
    Val lat = t.conv2d(x2, g.use(state.px_lat_w), g.use(state.px_lat_b), c2, H / 4, W / 4, pe, 1, 1, 0);
    Val pixel = t.gelu(t.conv2d(t.add(p, lat), g.use(state.px_out_w), g.use(state.px_out_b),
                                pe, H / 4, W / 4, pe, 3, 1, 1));
    return {tokens, pixel};
}

StepOutputG forward_step_g(ForwardGraph& g, const ModelState& state,
                           const EncodedG& enc, int t_step) {
    if (t_step < 1 || t_step > state.num_steps())
        throw StateError("unknown step " + std::to_string(t_step));
    const ModelConfig& cfg = state.cfg;
    Tape& t = g.tape;
    const PromptSet& ps = state.prompt_sets[t_step - 1];
    const int n = ps.n();

    Val x = t.constant(Mat::Zero(n, cfg.embed_dim));
    for (int l = 0; l < cfg.num_layers; ++l) {
        if (cfg.prompt_mode == PromptMode::deep)
            x = t.add(x, g.use(ps.blocks[l]));
        else if (l == 0)
            x = t.add(x, g.use(ps.blocks[0]));
        const LayerParams& lp = state.layers[l];
        x = layer_norm(g, t.add(x, mha(g, x, enc.tokens, lp.cross, cfg.num_heads, false)),
                       lp.ln1_g, lp.ln1_b);
        x = layer_norm(g, t.add(x, mha(g, x, x, lp.self, cfg.num_heads, true)),
                       lp.ln2_g, lp.ln2_b);
        Val ff = linear(g, t.gelu(linear(g, x, lp.ffn_w1, lp.ffn_b1)), lp.ffn_w2, lp.ffn_b2);
        x = layer_norm(g, t.add(x, ff), lp.ln3_g, lp.ln3_b);
    }
    Val emb = layer_norm(g, x, state.final_ln_g, state.final_ln_b);

    Val cls = apply_head_g(g, state, emb, t_step);
    Val m = linear(g, t.gelu(linear(g, emb, state.mask_w1, state.mask_b1)),
                   state.mask_w2, state.mask_b2);
    m = linear(g, t.gelu(m), state.mask_w3, state.mask_b3);
    Val mask_logits = t.matmul(m, enc.pixel);  // N x h*w
    return {cls, mask_logits, emb};
}

Val apply_head_g(ForwardGraph& g, const ModelState& state, Val emb, int head_index) {
    if (head_index < 1 || head_index > static_cast<int>(state.heads.size()))
        throw StateError("invalid head index " + std::to_string(head_index));
    const StepHead& h = state.heads[head_index - 1];
    Val x = emb;
    for (size_t i = 0; i + 1 < h.weights.size(); ++i)
        x = g.tape.gelu(linear(g, x, h.weights[i], h.biases[i]));
    return linear(g, x, h.weights.back(), h.biases.back());
}

// ---- plain forward --------------------------------------------------------

Mat image_to_mat(const PanopticSample& s) {
    Mat m(3, static_cast<Eigen::Index>(s.height) * s.width);
    for (int c = 0; c < 3; ++c)
        for (Eigen::Index p = 0; p < m.cols(); ++p)
            m(c, p) = s.image[c * s.height * s.width + p];
    return m;
}

Encoded encode(const ModelState& state, const Mat& image) {
    ForwardGraph g(false);
    EncodedG e = encode_g(g, state, image);
    return {g.tape.value(e.tokens), g.tape.value(e.pixel)};
}

StepOutput forward_step(const ModelState& state, const Mat& image, int t,
                        OpStats* stats) {
    ForwardGraph g(false);
    EncodedG e = encode_g(g, state, image);
    StepOutputG o = forward_step_g(g, state, e, t);
    if (stats) {
        stats->attn_pairwise_madds += g.tape.stats.attn_pairwise_madds;
        stats->total_madds += g.tape.stats.total_madds;
    }
    return {g.tape.value(o.class_logits), g.tape.value(o.mask_logits),
            g.tape.value(o.decoder_embeddings)};
}

std::vector<StepOutput> forward_all(const ModelState& state, const Mat& image,
                                    int upto, OpStats* stats) {
    if (upto < 1 || upto > state.num_steps())
        throw StateError("forward_all: step range out of bounds");
    ForwardGraph g(false);
    EncodedG e = encode_g(g, state, image);  // shared encode
    std::vector<StepOutput> out;
    for (int t = 1; t <= upto; ++t) {
        StepOutputG o = forward_step_g(g, state, e, t);
        out.push_back({g.tape.value(o.class_logits), g.tape.value(o.mask_logits),
                       g.tape.value(o.decoder_embeddings)});
    }
    if (stats) {
        stats->attn_pairwise_madds += g.tape.stats.attn_pairwise_madds;
        stats->total_madds += g.tape.stats.total_madds;
    }
    return out;
}

std::vector<Mat> apply_heads(const ModelState& state, const Mat& decoder_embeddings,
                             const std::vector<int>& head_indices) {
    ForwardGraph g(false);
    Val emb = g.tape.constant(decoder_embeddings);
    std::vector<Mat> out;
    for (int k : head_indices) out.push_back(g.tape.value(apply_head_g(g, state, emb, k)));
    return out;
}

long long count_trainable(const ModelState& state) {
    long long n = 0;
    for (const auto& p : state.registry)
        if (p->trainable) n += p->size();
    return n;
}

long long count_flops(const ModelState& state, int upto) {
    OpStats stats;
    Mat zero = Mat::Zero(3, static_cast<Eigen::Index>(state.cfg.image_height) *
                                state.cfg.image_width);
    forward_all(state, zero, upto, &stats);
    return stats.total_madds;
}

long long attention_pairwise_ops(const ModelState& state, int upto) {
    OpStats stats;
    Mat zero = Mat::Zero(3, static_cast<Eigen::Index>(state.cfg.image_height) *
                                state.cfg.image_width);
    forward_all(state, zero, upto, &stats);
    return stats.attn_pairwise_madds;
}

long long attention_pairwise_cost(const ModelConfig& cfg, int n) {
    return 2LL * n * n * cfg.embed_dim * cfg.num_layers;
}

}  // namespace promptseg
