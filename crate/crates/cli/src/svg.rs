//! Deterministic grouped-bar SVG for per-class TPR disparity. Pure string
//! assembly from the input values: same inputs, same bytes.

/// Model order and bar colors, fixed for reproducibility.
pub const MODELS: [(&str, &str); 3] = [
    ("baseline", "#4c72b0"),
    ("partial", "#dd8452"),
    ("full", "#55a868"),
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 620.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 340.0;

/// One SVG for one protected group: per class, three disparity bars
/// (baseline, partial, full), horizontal fair-band lines at 0.8 and 1.25,
/// undefined cells drawn as "NA" text instead of a bar.
pub fn disparity_svg(
    group: usize,
    ref_group: usize,
    per_class: &[[Option<f64>; 3]],
    provenance_xml: &str,
) -> String {
    let max_d = per_class
        .iter()
        .flatten()
        .filter_map(|v| *v)
        .fold(0.0f64, f64::max);
    let y_max = (max_d.max(1.25) * 1.15).max(1.5);
    let y_px = |v: f64| BOTTOM - (v / y_max) * (BOTTOM - TOP);

    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str(provenance_xml);
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\" font-family=\"sans-serif\">TPR disparity, group {group} vs reference group {ref_group}</text>\n",
        (LEFT + RIGHT) / 2.0
    ));

    // Axes and y ticks every 0.25.
    s.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"#333\"/>\n"
    ));
    s.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"#333\"/>\n"
    ));
    let mut k = 0usize;
    loop {
        let t = k as f64 * 0.25;
        if t > y_max {
            break;
        }
        let y = y_px(t);
        s.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"#333\"/>\n",
            LEFT - 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{t:.2}</text>\n",
            LEFT - 8.0,
            y + 4.0
        ));
        k += 1;
    }

    // The fair band: exactly two dashed lines.
    for bound in [0.8, 1.25] {
        let y = y_px(bound);
        s.push_str(&format!(
            "  <line class=\"band\" x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{RIGHT}\" y2=\"{y:.2}\" stroke=\"#777\" stroke-dasharray=\"5 4\"/>\n"
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"start\" font-family=\"sans-serif\" fill=\"#555\">{bound}</text>\n",
            RIGHT + 2.0,
            y + 4.0
        ));
    }

    // Grouped bars.
    let n_classes = per_class.len().max(1);
    let slot = (RIGHT - LEFT) / n_classes as f64;
    let bar_w = slot * 0.8 / 3.0;
    for (class, values) in per_class.iter().enumerate() {
        let x0 = LEFT + class as f64 * slot + slot * 0.1;
        for (m, value) in values.iter().enumerate() {
            let x = x0 + m as f64 * bar_w;
            match value {
                Some(v) => {
                    let y = y_px(*v);
                    s.push_str(&format!(
                        "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{:.2}\" fill=\"{}\"><title>class {class} {}: {v}</title></rect>\n",
                        BOTTOM - y,
                        MODELS[m].1,
                        MODELS[m].0
                    ));
                }
                None => {
                    s.push_str(&format!(
                        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\" fill=\"#999\">NA</text>\n",
                        x + bar_w / 2.0,
                        BOTTOM - 4.0
                    ));
                }
            }
        }
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">class {class}</text>\n",
            x0 + slot * 0.4,
            BOTTOM + 18.0
        ));
    }

    // Legend.
    for (m, (name, color)) in MODELS.iter().enumerate() {
        let x = LEFT + m as f64 * 110.0;
        s.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            HEIGHT - 26.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{name}</text>\n",
            x + 16.0,
            HEIGHT - 16.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
