#pragma once
// Gated recurrent cell over a textual input x and a visual-context input z:
//   i,f,o = sigmoid(x*W_x + h*W_h + z*W_z + b)
//   q     = tanh(...)
//   c     = f (*) c_prev + i (*) q
//   h     = o (*) tanh(c)

#include "hstory/numerics.hpp"

namespace hstory {

struct GateParams {
    NodePtr w_x;  // [D_in x D]
    NodePtr w_h;  // [D x D]
    NodePtr w_z;  // [D x D]
    NodePtr b;    // [1 x D]
};

struct LstmParams {
    GateParams input, forget, output, update;
};

struct CellState {
    NodePtr h;  // [1 x D], every coordinate in (-1, 1)
    NodePtr c;  // [1 x D]
};

inline CellState lstm_step(const NodePtr& x, const NodePtr& z, const CellState& prev, const LstmParams& p) {
    auto preact = [&](const GateParams& g) {
        return add(add(add(matmul(x, g.w_x), matmul(prev.h, g.w_h)), matmul(z, g.w_z)), g.b);
    };
    NodePtr i = sigmoid(preact(p.input));
    NodePtr f = sigmoid(preact(p.forget));
    NodePtr o = sigmoid(preact(p.output));
    NodePtr q = tanh(preact(p.update));
    NodePtr c = add(mul(f, prev.c), mul(i, q));
    return CellState{mul(o, tanh(c)), c};
}

}  // namespace hstory
