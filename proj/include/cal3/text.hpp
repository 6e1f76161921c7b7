#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cal3/errors.hpp"

namespace cal3 {

// ---------------------------------------------------------------------------
// Tabular records, sentence templates, and a word-level tokenizer. The
// template language is closed, so the vocabulary is enumerable; ids 0 and 1
// are reserved for padding and unknown words.
// ---------------------------------------------------------------------------

enum class Region : int { frontal = 0, parietal, temporal, occipital, cerebellar };
inline constexpr int kNumRegions = 5;

const char* region_name(Region r);
Region region_from_name(const std::string& name);
std::vector<Region> all_regions();

enum class Gender : int { male = 0, female };
const char* gender_name(Gender g);
Gender gender_from_name(const std::string& name);

struct TabularRecord {
    int age_at_diagnosis = 0;            // years, [0, 120]
    Gender gender = Gender::male;
    std::vector<Region> lesions;         // ordered, no duplicates
};

// Renders a record into its sentence. Records with no lesions produce the
// two demographic sentences only.
std::string record_to_sentence(const TabularRecord& record);

// Zero-shot class anchor sentence for one region.
std::string region_prompt(Region region);

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;

class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> words);

    int lookup(const std::string& word) const;           // kUnkId if absent
    int total_ids() const { return static_cast<int>(words_.size()) + 2; }
    int word_count() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

    // Plain-text form: one token per line, line number = id - 2.
    std::string to_text() const;
    static Vocabulary from_text(const std::string& text);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

// Ids assigned by descending corpus frequency, ties broken lexicographically.
Vocabulary build_vocab(const std::vector<std::string>& corpus);

// Every sentence the record templates can emit (ages 0..120, both genders,
// every region in first and subsequent position), enough to close the
// template vocabulary.
std::vector<std::string> template_closure_corpus();

struct TokenSequence {
    std::vector<int> ids;     // padded/truncated to max_tokens
    int length = 0;           // non-padding count
    bool truncated = false;
};

// Lowercase, strip periods and commas, split on whitespace.
std::vector<std::string> split_words(const std::string& text);

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab, int max_tokens);

}  // namespace cal3
