#pragma once

#include <string>
#include <vector>

#include "vground/array.hpp"
#include "vground/config.hpp"

namespace vground {

enum class QueryKind { Visual, Text, Category };

const char* query_kind_name(QueryKind k);
QueryKind query_kind_from_name(const std::string& name);

// Relative (cx, cy, w, h), all in [0,1].
struct Box {
    float cx = 0, cy = 0, w = 0, h = 0;
};

double box_iou(const Box& a, const Box& b);

// Inclusive frame range; |[start,end]| = end - start + 1.
struct Segment {
    int start = 0;
    int end = 0;

    int length() const { return end - start + 1; }
    bool operator==(const Segment&) const = default;
};

struct Query {
    QueryKind kind = QueryKind::Text;
    Array<float> crop;        // visual: [Hq x Wq x c]
    std::vector<int> tokens;  // text
    int category = -1;        // category
};

struct VideoTensor {
    Array<float> frames;  // [T x H x W x c]
    int fps_tag = 1;

    int length() const { return frames.rank() >= 1 ? frames.dim(0) : 0; }
};

struct Annotation {
    std::string id;
    Task task = Task::NLQ;
    std::string video_id;
    Query query;
    std::vector<Segment> segments;  // VQ2D/NLQ: 1 entry; MQ: all instances
    std::vector<Box> boxes;         // VQ2D: one per frame of segments[0]
    int query_frame = -1;           // VQ2D only
    int category_id = -1;           // MQ class index
    int concept_id = -1;               // generator provenance
};

// One planted pattern track. Annotation ground truth is derived from these.
struct Occurrence {
    int concept_id = -1;
    Segment segment;
    std::vector<Box> boxes;
};

struct Episode {
    std::string id;
    std::string split;  // "train" or "val"
    VideoTensor video;
    std::vector<Occurrence> occurrences;
    std::vector<Annotation> annotations;
};

struct ConceptBank {
    int pattern_size = 0;
    int channels = 0;
    std::vector<Array<float>> patterns;   // one [p x p x c] grid per concept
    std::vector<std::string> vocab;

    int concept_count() const { return static_cast<int>(patterns.size()); }
    int token_id(const std::string& word) const;
    std::vector<int> nlq_phrase(int concept_id) const;  // "where is <c>"
    std::vector<int> mq_phrase(int concept_id) const;   // "when did i do <c>"
};

struct Dataset {
    int format_version = 1;
    GenConfig gen_cfg;
    ConceptBank bank;
    std::vector<Episode> episodes;

    std::vector<const Episode*> split(const std::string& name) const;
    const Episode* find_episode(const std::string& id) const;
};

// Frames {0, r, 2r, ...}; the last partial group still contributes its frame.
VideoTensor subsample_video(const VideoTensor& v, int stride);

// Contiguous frame window [start, start+len).
VideoTensor crop_window(const VideoTensor& v, int start, int len);

// Binary tensor file: magic, version, dims, little-endian float32 payload.
void write_tensor_file(const std::string& path, const Array<float>& a);
Array<float> read_tensor_file(const std::string& path);

// Dataset directory layout: <dir>/manifest.json + <dir>/episodes/<id>.bin.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

}  // namespace vground
