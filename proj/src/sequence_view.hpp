#pragma once

#include <cstddef>
#include <string>

#include "mvret/error.hpp"
#include "mvret/tensor.hpp"

namespace mvret::detail {

// [B, C, L] or unbatched [C, L] (treated as B = 1).
struct SequenceView {
  std::size_t batch = 1;
  std::size_t channels = 0;
  std::size_t length = 0;
  bool batched = false;
};

inline SequenceView sequence_view(const Tensor& t, const char* what) {
  SequenceView v;
  if (t.rank() == 3) {
    v = {t.dim(0), t.dim(1), t.dim(2), true};
  } else if (t.rank() == 2) {
    v = {1, t.dim(0), t.dim(1), false};
  } else {
    fail(ErrorKind::shape, std::string(what) + ": expected [B, C, L] or [C, L], got " +
                               shape_to_string(t.shape()));
  }
  return v;
}

}  // namespace mvret::detail
