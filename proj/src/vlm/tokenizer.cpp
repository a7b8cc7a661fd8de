#include "promptlab/vlm/tokenizer.hpp"

#include <sstream>

#include "promptlab/core/error.hpp"
#include "promptlab/synth/synth.hpp"

namespace promptlab::vlm {

Tokenizer Tokenizer::build() {
  std::vector<std::string> vocab = {kPad, kBos, kEoc, "this", "is",
                                    "a",  "photo", "of"};
  for (const auto& cls : synth::class_table()) vocab.push_back(cls.name);
  return from_vocab(std::move(vocab));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> vocab) {
  Tokenizer t;
  t.vocab_ = std::move(vocab);
  for (size_t i = 0; i < t.vocab_.size(); ++i) {
    if (!t.index_.emplace(t.vocab_[i], static_cast<int>(i)).second) {
      throw ValueError("Tokenizer: duplicate word " + t.vocab_[i]);
    }
  }
  t.first_class_token_ =
      static_cast<int>(t.vocab_.size()) - synth::kNumClasses;
  return t;
}

int Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) {
    throw IndexError("Tokenizer: unknown word '" + word + "'");
  }
  return it->second;
}

const std::string& Tokenizer::word(int token_id) const {
  if (token_id < 0 || token_id >= vocab_size()) {
    throw IndexError("Tokenizer: id " + std::to_string(token_id) +
                     " outside vocabulary");
  }
  return vocab_[token_id];
}

bool Tokenizer::contains(const std::string& word) const {
  return index_.count(word) > 0;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string word;
  while (ss >> word) ids.push_back(id(word));
  return ids;
}

int Tokenizer::class_token(int class_id) const {
  if (class_id < 0 || class_id >= synth::kNumClasses) {
    throw IndexError("Tokenizer: class id " + std::to_string(class_id));
  }
  return first_class_token_ + class_id;
}

int Tokenizer::class_of_token(int token_id) const {
  const int cid = token_id - first_class_token_;
  return (cid >= 0 && cid < synth::kNumClasses) ? cid : -1;
}

}  // namespace promptlab::vlm
