#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace tqvsr {

// Dense row-major float32 matrix. Feature payloads everywhere in the corpus
// are 32-bit so that save/load round-trips are bit exact.
struct FloatMatrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> data;

    FloatMatrix() = default;
    FloatMatrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(size_t r, size_t c) { return data[r * cols + c]; }
    float at(size_t r, size_t c) const { return data[r * cols + c]; }
    const float* row(size_t r) const { return data.data() + r * cols; }
    float* row(size_t r) { return data.data() + r * cols; }

    bool operator==(const FloatMatrix& o) const = default;
};

enum class QueryType { Text, Visual, TextVisual };

inline std::string to_string(QueryType t) {
    switch (t) {
        case QueryType::Text: return "t";
        case QueryType::Visual: return "v";
        case QueryType::TextVisual: return "tv";
    }
    return "?";
}

inline QueryType query_type_from_string(const std::string& s) {
    if (s == "t") return QueryType::Text;
    if (s == "v") return QueryType::Visual;
    if (s == "tv") return QueryType::TextVisual;
    throw std::invalid_argument("unknown query type '" + s + "' (expected t, v or tv)");
}

}  // namespace tqvsr
