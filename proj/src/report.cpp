#include "stsopt/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

std::string num(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string escape_xml(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

class Svg {
 public:
  Svg(int width, int height) : width_(width), height_(height) {}

  void line(double x1, double y1, double x2, double y2, std::string_view stroke, double w = 1.0) {
    body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
          << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(w) << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, std::string_view fill) {
    body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
          << "\" fill=\"" << fill << "\"/>\n";
  }
  void circle(double cx, double cy, double r, std::string_view fill) {
    body_ << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\"" << num(r) << "\" fill=\"" << fill
          << "\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, std::string_view stroke) {
    if (pts.empty()) return;
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      body_ << (i ? " " : "") << num(pts[i].first) << ',' << num(pts[i].second);
    }
    body_ << "\"/>\n";
  }
  void text(double x, double y, std::string_view s, std::string_view anchor = "middle", int size = 12) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size
          << "\" font-family=\"sans-serif\" text-anchor=\"" << anchor << "\">" << escape_xml(s) << "</text>\n";
  }
  std::string str() const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_ << "\" height=\"" << height_
        << "\" viewBox=\"0 0 " << width_ << ' ' << height_ << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body_.str() << "</svg>\n";
    return out.str();
  }

 private:
  int width_, height_;
  std::ostringstream body_;
};

struct Frame {
  double left, top, width, height;
  double x0, x1, y0, y1;  // data ranges; y0 maps to the top edge
  double x(double v) const { return left + (x1 == x0 ? 0.5 : (v - x0) / (x1 - x0)) * width; }
  double y(double v) const { return top + (y1 == y0 ? 0.5 : (v - y0) / (y1 - y0)) * height; }
};

void axes(Svg& svg, const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  svg.line(f.left, f.top + f.height, f.left + f.width, f.top + f.height, "black");
  svg.line(f.left, f.top, f.left, f.top + f.height, "black");
  svg.text(f.left + f.width / 2, f.top + f.height + 34, xlabel);
  svg.text(f.left - 42, f.top + f.height / 2, ylabel, "middle");
}

}  // namespace

std::vector<IterationRecord> parse_iteration_log(std::string_view text) {
  std::vector<IterationRecord> records;
  std::size_t line_number = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw Error(ErrorCode::kMalformedLine, "expected a JSON object");
      records.push_back(IterationRecord::from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kMalformedLine, "line " + std::to_string(line_number) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::kMalformedLine, "line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  return records;
}

std::vector<IterationRecord> read_iteration_log(const std::filesystem::path& path) {
  return parse_iteration_log(read_file(path));
}

std::string rank_trajectory_svg(std::span<const IterationRecord> records) {
  Svg svg(640, 520);
  const double last = records.empty() ? 1.0 : static_cast<double>(records.back().iteration);
  std::size_t top_rank = 2;
  for (const auto& r : records) {
    if (r.rank) top_rank = std::max(top_rank, *r.rank);
  }
  const double max_rank = static_cast<double>(top_rank);

  Frame rank{70, 40, 540, 220, 0, std::max(last, 1.0), 1, max_rank};
  svg.text(340, 24, "Target rank vs iteration", "middle", 14);
  axes(svg, rank, "", "rank");
  for (std::size_t r = 1; r <= top_rank; ++r) {
    const double y = rank.y(static_cast<double>(r));
    svg.line(rank.left - 4, y, rank.left, y, "black");
    svg.text(rank.left - 8, y + 4, std::to_string(r), "end", 10);
  }
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : records) {
    if (!r.rank) continue;
    pts.emplace_back(rank.x(static_cast<double>(r.iteration)), rank.y(static_cast<double>(*r.rank)));
  }
  svg.polyline(pts, "#1f77b4");
  for (const auto& [x, y] : pts) svg.circle(x, y, 2.5, "#1f77b4");

  double lo = 0.0, hi = 1.0;
  if (!records.empty()) {
    lo = hi = records.front().loss;
    for (const auto& r : records) {
      lo = std::min(lo, r.loss);
      hi = std::max(hi, r.loss);
    }
  }
  Frame loss{70, 300, 540, 160, 0, std::max(last, 1.0), hi, lo};
  axes(svg, loss, "iteration", "loss");
  svg.text(loss.left - 8, loss.y(hi) + 4, num(hi, 3), "end", 10);
  svg.text(loss.left - 8, loss.y(lo) + 4, num(lo, 3), "end", 10);
  svg.text(loss.left, loss.top + loss.height + 16, "0", "middle", 10);
  svg.text(loss.left + loss.width, loss.top + loss.height + 16, num(last, 0), "middle", 10);
  pts.clear();
  for (const auto& r : records) pts.emplace_back(loss.x(static_cast<double>(r.iteration)), loss.y(r.loss));
  svg.polyline(pts, "#d62728");
  return svg.str();
}

std::string rank_distribution_svg(std::span<const TrialRow> rows) {
  std::map<std::size_t, std::size_t> without, with;
  std::size_t max_rank = 1, max_count = 1;
  for (const auto& r : rows) {
    max_count = std::max({max_count, ++without[r.rank_without], ++with[r.rank_with]});
    max_rank = std::max({max_rank, r.rank_without, r.rank_with});
  }
  Svg svg(420, 480);
  Frame f{90, 50, 260, 360, 0, 1, 1, static_cast<double>(max_rank)};
  svg.text(210, 28, "Target rank distribution", "middle", 14);
  axes(svg, f, "", "rank");
  for (std::size_t r = 1; r <= max_rank; ++r) {
    const double y = f.y(static_cast<double>(r));
    svg.line(f.left - 4, y, f.left, y, "black");
    svg.text(f.left - 8, y + 4, std::to_string(r), "end", 10);
  }
  const double col[2] = {f.left + f.width * 0.3, f.left + f.width * 0.7};
  svg.text(col[0], f.top + f.height + 20, "without STS");
  svg.text(col[1], f.top + f.height + 20, "with STS");
  const std::map<std::size_t, std::size_t>* hist[2] = {&without, &with};
  const char* colors[2] = {"#7f7f7f", "#2ca02c"};
  for (int c = 0; c < 2; ++c) {
    for (const auto& [rank, count] : *hist[c]) {
      const double radius = 3.0 + 12.0 * std::sqrt(static_cast<double>(count) / static_cast<double>(max_count));
      const double y = f.y(static_cast<double>(rank));
      svg.circle(col[c], y, radius, colors[c]);
      svg.text(col[c] + radius + 4, y + 4, std::to_string(count), "start", 10);
    }
  }
  return svg.str();
}

std::string advantage_svg(const AdvantageSummary& summary) {
  Svg svg(420, 360);
  Frame f{60, 50, 320, 240, 0, 3, 100, 0};
  svg.text(210, 28, "Effect of the STS over " + std::to_string(summary.n_trials) + " trials", "middle", 14);
  axes(svg, f, "", "% of trials");
  for (int p = 0; p <= 100; p += 25) {
    const double y = f.y(p);
    svg.line(f.left - 4, y, f.left, y, "black");
    svg.text(f.left - 8, y + 4, std::to_string(p), "end", 10);
  }
  const double values[3] = {summary.advantage_pct, summary.no_advantage_pct, summary.disadvantage_pct};
  const char* labels[3] = {"advantage", "no advantage", "disadvantage"};
  const char* colors[3] = {"#2ca02c", "#7f7f7f", "#d62728"};
  for (int i = 0; i < 3; ++i) {
    const double x = f.x(i + 0.2), w = f.x(i + 0.8) - x;
    svg.rect(x, f.y(values[i]), w, f.y(0) - f.y(values[i]), colors[i]);
    svg.text(x + w / 2, f.y(values[i]) - 6, num(values[i], 1) + "%", "middle", 11);
    svg.text(x + w / 2, f.top + f.height + 20, labels[i], "middle", 11);
  }
  return svg.str();
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIo, "SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

nlohmann::ordered_json Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : seeds) j["seeds"][k] = v;
  j["inputs"] = nlohmann::ordered_json::object();
  for (const auto& [label, path] : inputs) {
    j["inputs"][label] = {{"path", path}, {"sha256", sha256_file(path)}};
  }
  j["artifacts"] = nlohmann::ordered_json::object();
  for (const auto& a : artifacts) j["artifacts"][a.filename().string()] = sha256_file(a);
  return j;
}

void Manifest::write(const std::filesystem::path& path) const { write_file(path, to_json().dump(2) + "\n"); }

}  // namespace stsopt
