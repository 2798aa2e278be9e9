#include "paed/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "paed/error.hpp"

namespace paed {

int LabelMap::id_of(const std::string& name) const {
  auto it = ids.find(name);
  if (it == ids.end()) throw UnknownLabel("unknown label: \"" + name + "\"");
  return it->second;
}

LabelMap load_label_map(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label map: " + path);
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    names.push_back(line);
  }
  return label_map_from_names(std::move(names));
}

LabelMap label_map_from_names(std::vector<std::string> names) {
  LabelMap m;
  m.names = std::move(names);
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    if (!m.ids.emplace(m.names[i], static_cast<int>(i)).second) {
      throw ParseError("duplicate label: \"" + m.names[i] + "\"");
    }
  }
  return m;
}

std::vector<EventInstance> merge_same_class_overlaps(std::vector<EventInstance> events) {
  std::sort(events.begin(), events.end(), [](const EventInstance& a, const EventInstance& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.onset_s < b.onset_s;
  });
  std::vector<EventInstance> merged;
  for (const EventInstance& e : events) {
    if (!merged.empty() && merged.back().class_id == e.class_id &&
        e.onset_s <= merged.back().offset_s) {
      merged.back().offset_s = std::max(merged.back().offset_s, e.offset_s);
    } else {
      merged.push_back(e);
    }
  }
  std::sort(merged.begin(), merged.end(), [](const EventInstance& a, const EventInstance& b) {
    if (a.onset_s != b.onset_s) return a.onset_s < b.onset_s;
    return a.class_id < b.class_id;
  });
  return merged;
}

RecordingAnnotation load_annotations(const std::string& path, const LabelMap& labels,
                                     const std::string& recording_id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation file: " + path);
  RecordingAnnotation ann;
  ann.recording_id = recording_id;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected onset<TAB>offset<TAB>label");
    }
    EventInstance e;
    try {
      std::size_t used = 0;
      e.onset_s = std::stod(line.substr(0, tab1), &used);
      e.offset_s = std::stod(line.substr(tab1 + 1, tab2 - tab1 - 1), &used);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": malformed time field");
    }
    if (!(e.onset_s >= 0.0) || !(e.onset_s < e.offset_s)) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": need 0 <= onset < offset");
    }
    e.class_id = labels.id_of(line.substr(tab2 + 1));
    ann.events.push_back(e);
    ann.duration_s = std::max(ann.duration_s, e.offset_s);
  }
  ann.events = merge_same_class_overlaps(std::move(ann.events));
  return ann;
}

SegmentTarget render_segment_target(const RecordingAnnotation& ann, int start_frame,
                                    int context_frames, double hop_s, int n_classes) {
  if (start_frame < 0) throw Error("render_segment_target: negative start frame");
  SegmentTarget tgt;
  tgt.context_frames = context_frames;
  tgt.n_classes = n_classes;
  tgt.start_frame = start_frame;
  const std::size_t cells = static_cast<std::size_t>(context_frames) * static_cast<std::size_t>(n_classes);
  tgt.y.assign(cells, 0.0);
  tgt.p.assign(cells, 0.0);
  tgt.q.assign(cells, 0.0);

  const double tf = static_cast<double>(context_frames);
  for (const EventInstance& e : ann.events) {
    if (e.class_id < 0 || e.class_id >= n_classes) continue;
    const int onset_f = static_cast<int>(std::lround(e.onset_s / hop_s));
    const int offset_f = static_cast<int>(std::lround(e.offset_s / hop_s));
    const int t_lo = std::max(0, onset_f - start_frame);
    const int t_hi = std::min(context_frames - 1, offset_f - start_frame);
    for (int t = t_lo; t <= t_hi; ++t) {
      const int n = start_frame + t;
      const std::size_t i = tgt.idx(t, e.class_id);
      tgt.y[i] = 1.0;
      tgt.p[i] = std::min(static_cast<double>(n - onset_f) / tf, 1.0);
      tgt.q[i] = std::min(static_cast<double>(offset_f - n) / tf, 1.0);
    }
  }
  return tgt;
}

std::vector<SegmentRef> sample_training_segments(const std::vector<int>& frames_per_recording,
                                                 int context_frames, int stride) {
  if (stride < 1) throw Error("sample_training_segments: stride must be >= 1");
  std::vector<SegmentRef> refs;
  for (std::size_t r = 0; r < frames_per_recording.size(); ++r) {
    const int n = frames_per_recording[r];
    if (n < context_frames) {
      refs.push_back({static_cast<int>(r), 0});  // single zero-padded window
      continue;
    }
    for (int start = 0; start + context_frames <= n; start += stride) {
      refs.push_back({static_cast<int>(r), start});
    }
  }
  return refs;
}

}  // namespace paed
