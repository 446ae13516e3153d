#pragma once

#include <cstdlib>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "latentlab/errors.hpp"
#include "latentlab/tensor.hpp"

namespace latentlab {

inline bool debug_checks_default() {
    static const bool cached = [] {
        const char* env = std::getenv("LATENTLAB_DEBUG_CHECKS");
        return env != nullptr && env[0] != '0';
    }();
    return cached;
}

// Dynamic tape: one record per primitive application, appended in execution
// order, so the node list is always topologically sorted. Backward rules emit
// ordinary tape operations, which makes gradients themselves differentiable —
// that is what the single double-backward in the training loop relies on.
//
// A tape owns every intermediate value of one forward/backward episode and is
// meant to be scoped to it; parameters persist outside as plain tensors and
// re-enter each episode as leaves. Single-threaded per tape; distinct tapes
// are fully independent.
template <class Real>
class Tape {
public:
    // Result is aligned with the node's parents; -1 means no gradient flows
    // to that parent. Closures must capture node ids and scalars only, never
    // tensors; any value needed at backward time is read off the tape.
    using Vjp = std::function<std::vector<int>(Tape&, int gout, int self)>;

    struct Node {
        Tensor<Real> value;
        std::vector<int> parents;
        Vjp vjp;
        bool requires_grad = false;  // leaves only
        bool needs_grad = false;     // reachable from a requires_grad leaf
        const char* op = "";
    };

    bool debug_checks = debug_checks_default();

    int leaf(Tensor<Real> value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.needs_grad = requires_grad;
        n.op = requires_grad ? "leaf" : "const";
        return push(std::move(n));
    }

    int constant(Tensor<Real> value) { return leaf(std::move(value), false); }

    int apply(const char* op, Tensor<Real> value, std::vector<int> parents, Vjp vjp) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.op = op;
        for (int p : n.parents) {
            check_id(p);
            if (nodes_[static_cast<size_t>(p)].needs_grad) n.needs_grad = true;
        }
        if (n.needs_grad) n.vjp = std::move(vjp);
        return push(std::move(n));
    }

    const Tensor<Real>& val(int id) const {
        check_id(id);
        return nodes_[static_cast<size_t>(id)].value;
    }

    bool needs_grad(int id) const {
        check_id(id);
        return nodes_[static_cast<size_t>(id)].needs_grad;
    }

    const char* op_name(int id) const {
        check_id(id);
        return nodes_[static_cast<size_t>(id)].op;
    }

    std::int64_t size() const { return static_cast<std::int64_t>(nodes_.size()); }

    // Reverse-mode sweep from a scalar loss. Returns adjoint node ids aligned
    // with `wrt` (a zero tensor where the loss does not reach the node). Each
    // node at or below `loss` is visited exactly once, in reverse creation
    // order, so fan-out gradients accumulate additively and deterministically.
    // Nodes appended by the sweep itself land above `loss` and are untouched;
    // calling gradients() again on a scalar built from the returned adjoints
    // differentiates through the first backward pass.
    std::vector<int> gradients(int loss, const std::vector<int>& wrt) {
        check_id(loss);
        if (val(loss).numel() != 1)
            throw ContractError(std::string("gradients: loss must be scalar, got ") + shape_str(val(loss).shape));
        for (int w : wrt) {
            check_id(w);
            if (w > loss)
                throw ContractError("gradients: wrt node created after the loss");
        }

        std::vector<int> adj(static_cast<size_t>(loss) + 1, -1);
        adj[static_cast<size_t>(loss)] = constant(Tensor<Real>::ones({1}));

        for (int id = loss; id >= 0; --id) {
            const int gid = adj[static_cast<size_t>(id)];
            if (gid < 0) continue;
            if (!nodes_[static_cast<size_t>(id)].needs_grad) continue;
            if (!nodes_[static_cast<size_t>(id)].vjp) continue;  // leaf
            // Copy out: the vjp will append nodes and may reallocate nodes_.
            Vjp fn = nodes_[static_cast<size_t>(id)].vjp;
            std::vector<int> parents = nodes_[static_cast<size_t>(id)].parents;
            std::vector<int> contrib = fn(*this, gid, id);
            if (contrib.size() != parents.size())
                throw ContractError(std::string("vjp arity mismatch in op ") + nodes_[static_cast<size_t>(id)].op);
            for (size_t j = 0; j < parents.size(); ++j) {
                const int p = parents[j];
                const int c = contrib[j];
                if (c < 0) continue;
                if (!nodes_[static_cast<size_t>(p)].needs_grad) continue;
                if (!same_shape(val(c), val(p)))
                    throw DimensionError(std::string("vjp shape mismatch in op ") + nodes_[static_cast<size_t>(id)].op +
                                         ": " + shape_str(val(c).shape) + " vs " + shape_str(val(p).shape));
                int& slot = adj[static_cast<size_t>(p)];
                slot = slot < 0 ? c : add_nodes(slot, c);
            }
        }

        std::vector<int> out;
        out.reserve(wrt.size());
        for (int w : wrt) {
            const int a = adj[static_cast<size_t>(w)];
            out.push_back(a >= 0 ? a : constant(Tensor<Real>::zeros(val(w).shape)));
        }
        return out;
    }

private:
    std::vector<Node> nodes_;

    int push(Node n) {
        if (debug_checks && !n.value.all_finite())
            throw NumericError(std::string("non-finite value out of op ") + n.op);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    void check_id(int id) const {
        if (id < 0 || id >= static_cast<int>(nodes_.size()))
            throw ContractError("bad node id " + std::to_string(id));
    }

    // Elementwise adjoint accumulation, recorded so it stays differentiable.
    int add_nodes(int a, int b) {
        const Tensor<Real>& ta = val(a);
        const Tensor<Real>& tb = val(b);
        Tensor<Real> out(ta.shape);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
        return apply("accum", std::move(out), {a, b}, [](Tape&, int g, int) {
            return std::vector<int>{g, g};
        });
    }
};

// Lightweight handle pairing a tape with a node id. Ops in ops.hpp take and
// return these.
template <class Real>
struct Var {
    Tape<Real>* tape = nullptr;
    int id = -1;

    Var() = default;
    Var(Tape<Real>& t, int i) : tape(&t), id(i) {}

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<Real>& val() const { return tape->val(id); }
    Real scalar() const {
        if (val().numel() != 1) throw ContractError("scalar() on non-scalar var");
        return val()[0];
    }
};

template <class Real>
inline Var<Real> make_leaf(Tape<Real>& t, Tensor<Real> v, bool requires_grad = false) {
    return Var<Real>(t, t.leaf(std::move(v), requires_grad));
}

template <class Real>
inline Var<Real> make_const(Tape<Real>& t, Tensor<Real> v) {
    return Var<Real>(t, t.constant(std::move(v)));
}

// Convenience wrapper over Tape::gradients for Var handles.
template <class Real>
inline std::vector<Var<Real>> gradients(Var<Real> loss, const std::vector<Var<Real>>& wrt) {
    std::vector<int> ids;
    ids.reserve(wrt.size());
    for (const auto& w : wrt) ids.push_back(w.id);
    std::vector<int> out = loss.tape->gradients(loss.id, ids);
    std::vector<Var<Real>> vars;
    vars.reserve(out.size());
    for (int id : out) vars.emplace_back(*loss.tape, id);
    return vars;
}

}  // namespace latentlab
