#include "textcsp/nn/autograd.hpp"

#include <unordered_set>

namespace textcsp::nn {
namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

template <typename T>
void backward(const Var<T>& root, const Tensor<T>& seed) {
  if (!root.requires_grad()) return;
  require_same_shape(root.value(), seed, "backward seed");

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor<T>& g = root.node()->grad_buffer();
  for (Index i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(node->grad);
    // Interior gradients are not needed once propagated.
    node->grad = Tensor<T>();
  }
}

template <typename T>
void backward(const Var<T>& root) {
  backward(root, Tensor<T>(root.shape(), T{1}));
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template void backward<float>(const Var<float>&, const Tensor<float>&);
template void backward<double>(const Var<double>&, const Tensor<double>&);

}  // namespace textcsp::nn
