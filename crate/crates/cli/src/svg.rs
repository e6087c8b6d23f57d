//! Minimal grouped-bar SVG rendering: bars with std whiskers on a fixed
//! [0, 1] success axis. Plots are artifacts, not UIs, so everything is
//! hand-rolled and dependency-free.

const BAR_W: f64 = 46.0;
const GAP: f64 = 24.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 260.0;
const BOTTOM: f64 = 70.0;

pub fn grouped_bar_svg(title: &str, labels: &[String], means: &[f64], stds: &[f64]) -> String {
    assert_eq!(labels.len(), means.len());
    assert_eq!(labels.len(), stds.len());
    let n = labels.len();
    let width = LEFT + 20.0 + n as f64 * (BAR_W + GAP);
    let height = TOP + PLOT_H + BOTTOM;
    let y_of = |v: f64| TOP + PLOT_H * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"24\" font-size=\"14\">{}</text>\n",
        escape(title)
    ));
    // axis and gridlines every 0.25
    for i in 0..=4 {
        let v = i as f64 * 0.25;
        let y = y_of(v);
        s.push_str(&format!(
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ccc\"/>\n",
            width - 10.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>\n",
            LEFT - 6.0,
            y + 4.0
        ));
    }
    for (i, ((label, &mean), &std)) in labels.iter().zip(means).zip(stds).enumerate() {
        let x = LEFT + 10.0 + i as f64 * (BAR_W + GAP);
        let y = y_of(mean);
        s.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{BAR_W}\" height=\"{:.1}\" fill=\"#4878a8\"/>\n",
            y_of(0.0) - y
        ));
        if std > 0.0 {
            let cx = x + BAR_W / 2.0;
            let (lo, hi) = (y_of(mean - std), y_of(mean + std));
            s.push_str(&format!(
                "<line x1=\"{cx:.1}\" y1=\"{hi:.1}\" x2=\"{cx:.1}\" y2=\"{lo:.1}\" stroke=\"#222\"/>\n"
            ));
            for w in [hi, lo] {
                s.push_str(&format!(
                    "<line x1=\"{:.1}\" y1=\"{w:.1}\" x2=\"{:.1}\" y2=\"{w:.1}\" stroke=\"#222\"/>\n",
                    cx - 8.0,
                    cx + 8.0
                ));
            }
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.2}</text>\n",
            x + BAR_W / 2.0,
            y - 6.0,
            mean
        ));
        // label rotated so method_priority names fit under the bar
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" transform=\"rotate(-35 {:.1} {:.1})\">{}</text>\n",
            x + BAR_W / 2.0,
            TOP + PLOT_H + 16.0,
            x + BAR_W / 2.0,
            TOP + PLOT_H + 16.0,
            escape(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
