#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace promptlab::vlm {

// Word-level vocabulary: specials, the query-template words, then the 48
// class names in class-id order. Every class name is a single token.
class Tokenizer {
 public:
  static Tokenizer build();
  static Tokenizer from_vocab(std::vector<std::string> vocab);

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  bool contains(const std::string& word) const;
  std::vector<int> encode(const std::string& text) const;  // whitespace split
  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  int pad_id() const { return 0; }
  int bos_id() const { return 1; }
  int eoc_id() const { return 2; }
  int class_token(int class_id) const;
  int class_of_token(int token_id) const;  // -1 if not a class token

  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEoc = "<eoc>";

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  int first_class_token_ = 0;
};

}  // namespace promptlab::vlm
