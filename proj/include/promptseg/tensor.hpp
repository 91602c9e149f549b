#pragma once

#include "promptseg/common.hpp"

#include <functional>
#include <vector>

namespace promptseg {

// Reverse-mode autodiff over dense 2-D arrays. A Tape owns all intermediate
// nodes of one forward pass; creation order is the topological order, so
// backward() is a single reverse sweep. 3-D activations (feature maps) are
// stored as [channels x H*W].
//
// Nodes whose inputs are all non-differentiable skip gradient work entirely,
// which is what makes frozen-encoder training steps cheap.

struct Val {
    int id = -1;
    bool valid() const { return id >= 0; }
};

struct OpStats {
    long long attn_pairwise_madds = 0;  // query-query / query-key pairwise terms
    long long total_madds = 0;
};

class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    const Mat& value(Val v) const { return nodes_[v.id].val; }
    const Mat& grad(Val v) const { return nodes_[v.id].grad; }
    bool requires_grad(Val v) const { return nodes_[v.id].needs; }
    size_t size() const { return nodes_.size(); }

    OpStats stats;

    Val leaf(const Mat& value, bool needs = true);
    Val constant(const Mat& value) { return leaf(value, false); }

    Val add(Val a, Val b);
    Val sub(Val a, Val b);
    Val mul(Val a, Val b);                 // elementwise, same shape
    Val div(Val a, Val b);                 // elementwise, same shape
    Val affine(Val a, double k, double c); // k*a + c
    Val scale(Val a, double k) { return affine(a, k, 0.0); }

    Val add_rowvec(Val a, Val row);        // row: 1 x cols, broadcast over rows
    Val mul_rowvec(Val a, Val row);

    Val matmul(Val a, Val b);              // a * b
    Val matmul_nt(Val a, Val b);           // a * b^T
    Val transpose(Val a);

    Val gelu(Val a);                       // exact erf form
    Val sigmoid(Val a);
    Val softmax_rows(Val a);
    Val layernorm_rows(Val a, double eps = 1e-5);

    Val slice_cols(Val a, int start, int n);
    Val slice_rows(Val a, int start, int n);
    Val concat_cols(Val a, Val b);

    Val sum(Val a);                        // 1x1
    Val mean(Val a);

    // mean over elements of BCE-with-logits against a constant target.
    Val bce_logits_mean(Val logits, const Mat& target);

    // x: [Cin x H*W], w: [Cout x Cin*k*k], b: [Cout x 1]; zero padding.
    Val conv2d(Val x, Val w, Val b, int cin, int h, int wd, int cout, int k,
               int stride, int pad);

    Val upsample2x(Val x, int c, int h, int w);

    // Seed d(out)/d(out) = 1 and sweep. out must be 1x1.
    void backward(Val out);

  private:
    struct Node {
        Mat val;
        Mat grad;
        bool needs = false;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;

    Node& at(int id) { return nodes_[id]; }
    int push(Mat value, bool needs, std::function<void()> back);
    void ensure_grad(int id);
};

}  // namespace promptseg
