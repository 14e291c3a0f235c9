#pragma once

#include <cstddef>
#include <vector>

#include "espattn/matrix.hpp"

namespace espattn {

enum class SortMode { kSoft, kHard };

// Permutation of v into ascending order: result[r] is the index of the value
// of rank r. Ties keep their original relative order.
std::vector<std::size_t> argsort_stable(const Vector& v);

// N x N row-stochastic relaxation of the ascending-sort permutation:
// row i is softmax(-|sorted(v)_i - v_j| / t) over j. As t -> 0 this
// approaches the exact permutation matrix (with stable tie handling).
Matrix soft_sort(const Vector& v, double t);

// Exact permutation matrix: P * v is sorted ascending.
Matrix hard_argsort_perm(const Vector& v);

// Gradient of sum(upstream .* soft_sort(v, t)) with respect to v. Gradients
// flow through both the sorted copy and the raw entries of v.
Vector soft_sort_backward(const Vector& v, double t, const Matrix& upstream);

}  // namespace espattn
