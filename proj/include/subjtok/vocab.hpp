#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace subjtok {

/// Word-level vocabulary of the toy text encoder. Ids 0..4 are reserved:
/// pad, unk, bos, eos and the placeholder S*.
class Vocabulary {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kUnk = 1;
  static constexpr int64_t kBos = 2;
  static constexpr int64_t kEos = 3;
  static constexpr int64_t kPlaceholder = 4;

  /// Template words, editing-prompt words and the toy world lexicon.
  static Vocabulary toy();
  explicit Vocabulary(std::vector<std::string> words);

  /// Throws VocabularyError for out-of-vocabulary words.
  int64_t id(std::string_view word) const;
  bool contains(std::string_view word) const;
  /// bos, word ids (unknown words map to unk), eos.
  std::vector<int64_t> encode(std::string_view text) const;
  /// Like encode, but unknown words raise VocabularyError.
  std::vector<int64_t> encode_strict(std::string_view text) const;
  const std::string& word(int64_t id) const { return words_.at(static_cast<size_t>(id)); }
  int64_t size() const { return static_cast<int64_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  static std::vector<std::string> split(std::string_view text);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int64_t> index_;
};

}  // namespace subjtok
