#ifndef PAED_ANNOTATION_HPP
#define PAED_ANNOTATION_HPP

#include <map>
#include <string>
#include <vector>

namespace paed {

struct EventInstance {
  int class_id = 0;
  double onset_s = 0.0;
  double offset_s = 0.0;
};

struct RecordingAnnotation {
  std::string recording_id;
  std::vector<EventInstance> events;  // same-class overlaps merged, sorted by onset
  double duration_s = 0.0;
};

struct FrameTriplet {
  double y = 0.0;  // event active at this frame
  double p = 0.0;  // normalized distance to onset
  double q = 0.0;  // normalized distance to offset
};

// Supervision for one context window of T frames and C classes.
struct SegmentTarget {
  int context_frames = 0;  // T
  int n_classes = 0;       // C
  int start_frame = 0;
  std::vector<double> y, p, q;  // [T*C], t-major

  std::size_t idx(int t, int c) const { return static_cast<std::size_t>(t) * n_classes + c; }
  FrameTriplet at(int t, int c) const { return {y[idx(t, c)], p[idx(t, c)], q[idx(t, c)]}; }
};

// One class name per line; line number is the class id.
struct LabelMap {
  std::vector<std::string> names;
  std::map<std::string, int> ids;

  int size() const { return static_cast<int>(names.size()); }
  int id_of(const std::string& name) const;  // throws UnknownLabel
};

LabelMap load_label_map(const std::string& path);
LabelMap label_map_from_names(std::vector<std::string> names);

// Union of overlapping (or touching) same-class intervals; cross-class
// overlap is preserved untouched.
std::vector<EventInstance> merge_same_class_overlaps(std::vector<EventInstance> events);

// Parses "onset_s<TAB>offset_s<TAB>label" lines.
RecordingAnnotation load_annotations(const std::string& path, const LabelMap& labels,
                                     const std::string& recording_id = "");

// Renders the per-frame (y, p, q) triplets for the window starting at
// start_frame: distances count frames to the covering event's boundaries,
// normalized by T and clipped to [0,1]; inactive cells stay all-zero.
SegmentTarget render_segment_target(const RecordingAnnotation& ann, int start_frame,
                                    int context_frames, double hop_s, int n_classes);

struct SegmentRef {
  int recording_index = 0;
  int start_frame = 0;
};

// Window starts {0, stride, 2*stride, ...} while start+T fits; recordings
// shorter than T contribute a single zero-padded window at 0.
std::vector<SegmentRef> sample_training_segments(const std::vector<int>& frames_per_recording,
                                                 int context_frames, int stride);

}  // namespace paed

#endif  // PAED_ANNOTATION_HPP
