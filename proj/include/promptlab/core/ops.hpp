#pragma once

#include <vector>

#include "promptlab/core/tensor.hpp"

namespace promptlab::core {

// Primitive differentiable ops. Every op takes the tape first; passing
// nullptr runs forward-only (identical values, nothing recorded). An op
// records a backward node iff a tape is given and some input requires
// gradients.

Tensor add(Tape* tape, Tensor a, Tensor b);
// x[r,c] + v broadcast over rows; v is rank-1 [c].
Tensor add_rowvec(Tape* tape, Tensor x, Tensor v);
Tensor mul(Tape* tape, Tensor a, Tensor b);
Tensor scale(Tape* tape, Tensor a, double factor);

Tensor matmul(Tape* tape, Tensor a, Tensor b);
Tensor transpose(Tape* tape, Tensor a);
Tensor reshape(Tape* tape, Tensor a, std::vector<int> new_shape);

// Row-wise softmax with max subtraction. Rejects non-finite inputs.
Tensor softmax_rows(Tape* tape, Tensor x);

// Per-row normalization (population variance) with affine gamma/beta [c].
Tensor layer_norm(Tape* tape, Tensor x, Tensor gamma, Tensor beta,
                  double eps = 1e-5);

// tanh approximation, fixed so checkpoints are portable:
// 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
Tensor gelu(Tape* tape, Tensor x);

// Gathers rows of table [v,d] at the given ids -> [|ids|, d].
Tensor embedding_lookup(Tape* tape, Tensor table,
                        const std::vector<int>& ids);

Tensor concat_rows(Tape* tape, std::vector<Tensor> parts);
Tensor concat_cols(Tape* tape, std::vector<Tensor> parts);
Tensor slice_rows(Tape* tape, Tensor a, int start, int len);
Tensor slice_cols(Tape* tape, Tensor a, int start, int len);

Tensor mean_rows(Tape* tape, Tensor a);  // [r,c] -> [1,c]
Tensor sum_all(Tape* tape, Tensor a);    // -> rank-0 scalar

// Mean of -log softmax(logits[t])[targets[t]] over positions with
// mask[t] == true. logits is [t,v]. At least one position must be active;
// active targets must be valid vocabulary ids.
Tensor cross_entropy(Tape* tape, Tensor logits,
                     const std::vector<int>& targets,
                     const std::vector<bool>& mask);

// x [cin,h,w], w [cout,cin,kh,kw], bias [cout]; zero padding.
Tensor conv2d(Tape* tape, Tensor x, Tensor w, Tensor bias, int stride,
              int pad);

// x [c,h,w] -> [c,out_h,out_w]; cell (i,j) averages the input region
// [floor(i*h/out_h), ceil((i+1)*h/out_h)) x [...],
Tensor adaptive_avg_pool2d(Tape* tape, Tensor x, int out_h, int out_w);

}  // namespace promptlab::core
