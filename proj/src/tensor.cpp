#include "l3/tensor.hpp"

#include <unordered_set>

namespace l3 {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

void detail::set_grad_enabled(bool v) { g_grad_enabled = v; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

template <typename T>
void backward(Tensor<T>& loss) {
  check(loss.numel() == 1, ErrorKind::Dimension, "backward() expects a scalar loss");
  auto root = loss.node();
  check(root->requires_grad, ErrorKind::Internal, "backward() on a graph with no recorded grads");

  // Iterative post-order DFS; order is a function of graph construction only,
  // so replays are deterministic.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward) n->backward(*n);
  }
}

template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);

}  // namespace l3
