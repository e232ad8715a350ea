#pragma once

#include "mvret/dataset.hpp"

namespace testing_support {

// A few seconds of training at most: 4 seen / 3 unseen classes, 6 views.
inline mvret::SyntheticSpec small_spec(std::uint64_t seed = 5) {
  mvret::SyntheticSpec s = mvret::SyntheticSpec::standard(seed);
  s.seen_classes = 4;
  s.unseen_classes = 3;
  s.objects_per_class = 10;
  s.views = 6;
  s.dino_dim = 8;
  s.clip_dim = 6;
  s.nuisance_rank = 2;
  s.lexicon_size = 20;
  return s;
}

}  // namespace testing_support
