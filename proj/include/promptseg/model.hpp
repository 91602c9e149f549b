#pragma once

#include "promptseg/data.hpp"
#include "promptseg/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace promptseg {

enum class PromptMode { shallow, deep };

struct ModelConfig {
    int image_height = 64;
    int image_width = 64;
    int embed_dim = 64;       // D, also deepest encoder channel count
    int num_layers = 3;       // L
    int num_heads = 4;
    int pixel_embed_dim = 64;
    int mask_height = 16;     // image / 4
    int mask_width = 16;
    int mlp_hidden = 64;
    int mlp_depth = 2;        // hidden layers in classifier heads
    PromptMode prompt_mode = PromptMode::deep;
    int min_prompts = 10;     // floor on per-step prompt count
    bool masked_attention = false;  // reserved; plain cross-attention is used

    int tokens() const { return (image_height / 8) * (image_width / 8); }
    void validate() const;
};

struct Param {
    std::string name;
    std::string group;
    Mat value;
    bool trainable = true;

    long long size() const { return static_cast<long long>(value.size()); }
};
using ParamPtr = std::shared_ptr<Param>;

struct AttnParams {
    ParamPtr wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerParams {
    AttnParams cross, self;
    ParamPtr ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    ParamPtr ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
};

struct PromptSet {
    int step = 0;                     // 1-based
    std::vector<ParamPtr> blocks;     // shallow: 1 block, deep: L blocks, each N^t x D
    std::vector<int> local_classes;   // global class ids of C^t, in order
    int n() const { return static_cast<int>(blocks.front()->value.rows()); }
};

struct StepHead {
    int step = 0;
    std::vector<ParamPtr> weights;    // mlp_depth hidden layers + output, no no-obj unit
    std::vector<ParamPtr> biases;
};

struct StepOutput {
    Mat class_logits;        // N^t x |C^t|, pre-activation
    Mat mask_logits;         // N^t x h*w, pre-activation
    Mat decoder_embeddings;  // N^t x D, final-layer
};

struct ModelState {
    ModelConfig cfg;
    ClassCatalog catalog;

    ParamPtr conv1_w, conv1_b, conv2_w, conv2_b, conv3_w, conv3_b;
    ParamPtr px_proj_w, px_proj_b, px_lat_w, px_lat_b, px_out_w, px_out_b;
    std::vector<LayerParams> layers;
    ParamPtr final_ln_g, final_ln_b;
    ParamPtr mask_w1, mask_b1, mask_w2, mask_b2, mask_w3, mask_b3;

    std::vector<PromptSet> prompt_sets;
    std::vector<StepHead> heads;

    std::vector<ParamPtr> registry;  // every parameter, creation order
    Mat posenc;                      // fixed sinusoidal, tokens x D

    int num_steps() const { return static_cast<int>(prompt_sets.size()); }
    int current_step() const { return num_steps(); }
    ModelState clone() const;

    void set_group_trainable(const std::string& group, bool trainable);
    std::vector<std::string> groups() const;
};

// prompt count per step: max(num_classes, floor), default floor 10
int prompt_count_for(int num_classes, int floor = 10);

ModelState init_model(const ModelConfig& cfg, const ClassCatalog& catalog,
                      const TaskProtocol& protocol, uint64_t seed);

// Freezes everything trained so far and allocates a trainable prompt set and
// head for the new classes.
void add_step(ModelState& state, const std::vector<int>& new_classes, uint64_t seed);

struct Encoded {
    Mat tokens;  // T x D, positional encoding applied
    Mat pixel;   // pixel_embed_dim x h*w
};

Mat image_to_mat(const PanopticSample& s);  // 3 x H*W

Encoded encode(const ModelState& state, const Mat& image);
StepOutput forward_step(const ModelState& state, const Mat& image, int t,
                        OpStats* stats = nullptr);
std::vector<StepOutput> forward_all(const ModelState& state, const Mat& image,
                                    int upto, OpStats* stats = nullptr);

// Evaluates the listed classifier heads (1-based) on decoder embeddings of
// some prompt set; block k has shape N x |C^k|.
std::vector<Mat> apply_heads(const ModelState& state, const Mat& decoder_embeddings,
                             const std::vector<int>& head_indices);

long long count_trainable(const ModelState& state);
// Measured multiply-accumulate count of a full forward over steps 1..upto.
long long count_flops(const ModelState& state, int upto);
// Measured pairwise (query-query) attention cost of forward over steps 1..upto.
long long attention_pairwise_ops(const ModelState& state, int upto);
// Closed-form per-set pairwise cost f(N).
long long attention_pairwise_cost(const ModelConfig& cfg, int n);

// ---- differentiable forward (used by training) ----------------------------

class ForwardGraph {
  public:
    explicit ForwardGraph(bool grad_enabled) : grad_enabled_(grad_enabled) {}

    Tape tape;

    Val use(const ParamPtr& p);
    const std::vector<std::pair<Param*, Val>>& bindings() const { return bindings_; }
    bool grad_enabled() const { return grad_enabled_; }

  private:
    bool grad_enabled_;
    std::vector<std::pair<Param*, Val>> bindings_;
};

struct EncodedG {
    Val tokens;
    Val pixel;
};

struct StepOutputG {
    Val class_logits;
    Val mask_logits;
    Val decoder_embeddings;
};

EncodedG encode_g(ForwardGraph& g, const ModelState& state, const Mat& image);
StepOutputG forward_step_g(ForwardGraph& g, const ModelState& state,
                           const EncodedG& enc, int t);
Val apply_head_g(ForwardGraph& g, const ModelState& state, Val decoder_embeddings,
                 int head_index);

}  // namespace promptseg
