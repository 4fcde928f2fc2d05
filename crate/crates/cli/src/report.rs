use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use xmc_core::attribution::AttributionVector;
use xmc_core::data::{Dataset, TokenizedDocument};
use xmc_core::Result;

use crate::manifest::Outputs;
use crate::table::{aggregate, MetricRow};

const STYLE: &str = "body{font-family:sans-serif;max-width:70em;margin:2em auto;line-height:1.6}\
table{border-collapse:collapse;margin-bottom:2em}td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}\
th:first-child,td:first-child{text-align:left}.tok{padding:1px 0}.ev{text-decoration:underline;\
text-decoration-thickness:2px;text-decoration-color:#1a5fb4}.doc{margin-bottom:1.5em}";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title><style>{STYLE}</style></head>\n<body>\n<h1>{t}</h1>\n{body}</body></html>\n",
        t = escape(title)
    )
}

/// Tokens with a red background scaled by score / max score; evidence
/// tokens are underlined.
pub fn highlight(doc: &TokenizedDocument, scores: &[f64], evidence: &[usize]) -> String {
    let max = scores.iter().cloned().fold(0.0, f64::max);
    let ev: BTreeSet<usize> = evidence.iter().copied().collect();
    let mut s = String::new();
    for (i, surface) in doc.surfaces.iter().enumerate() {
        if i > 0 && doc.offsets[i].0 > doc.offsets[i - 1].1 {
            s.push(' ');
        }
        let shown = match (surface.is_empty(), i) {
            (false, _) => escape(surface),
            (true, 0) => "&lt;s&gt;".into(),
            (true, _) => "&lt;/s&gt;".into(),
        };
        let alpha = if max > 0.0 { scores[i].max(0.0) / max } else { 0.0 };
        let class = if ev.contains(&i) { "tok ev" } else { "tok" };
        let _ = write!(
            s,
            "<span class=\"{class}\" style=\"background:rgba(220,40,40,{alpha:.3})\" title=\"{:.4}\">{shown}</span>",
            scores[i]
        );
    }
    s
}

fn summary_tables(rows: &[MetricRow]) -> String {
    let agg = aggregate(rows);
    let mut cells: BTreeMap<(String, String), BTreeMap<String, (f64, f64)>> = BTreeMap::new();
    let mut metrics: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for pair in agg.chunks(2) {
        let (m, s) = (&pair[0], &pair[1]);
        let key = (m.strategy.clone(), m.split.clone());
        let names = metrics.entry(key.clone()).or_default();
        if !names.contains(&m.metric) {
            names.push(m.metric.clone());
        }
        cells
            .entry(key)
            .or_default()
            .insert(format!("{}\u{0}{}", m.method, m.metric), (m.value, s.value));
    }
    let mut html = String::new();
    for ((strategy, split), names) in &metrics {
        let table = &cells[&(strategy.clone(), split.clone())];
        let methods: BTreeSet<&str> = table.keys().filter_map(|k| k.split('\u{0}').next()).collect();
        let _ = write!(html, "<h2>{} / {}</h2>\n<table><tr><th>method</th>", escape(strategy), escape(split));
        for n in names {
            let _ = write!(html, "<th>{}</th>", escape(n));
        }
        html.push_str("</tr>\n");
        for m in methods {
            let _ = write!(html, "<tr><td>{}</td>", escape(m));
            for n in names {
                match table.get(&format!("{m}\u{0}{n}")) {
                    Some((mean, std)) => {
                        let _ = write!(html, "<td>{mean:.4} &plusmn; {std:.4}</td>");
                    }
                    None => html.push_str("<td></td>"),
                }
            }
            html.push_str("</tr>\n");
        }
        html.push_str("</table>\n");
    }
    html
}

/// Writes `report/index.html` and one page per rendered test document.
pub fn write(
    o: &mut Outputs,
    test: &Dataset,
    attributions: &[(String, Vec<AttributionVector>)],
    rows: &[MetricRow],
    max_docs: usize,
) -> Result<()> {
    let lookup: Vec<HashMap<(&str, &str), &AttributionVector>> = attributions
        .iter()
        .map(|(_, v)| v.iter().map(|a| ((a.doc_id.as_str(), a.code.as_str()), a)).collect())
        .collect();
    let mut links = String::new();
    let mut rendered = 0;
    for (d, doc) in test.docs.iter().enumerate() {
        if rendered == max_docs {
            break;
        }
        let explained: Vec<_> = doc.codes.iter().filter(|c| !c.tokens.is_empty()).collect();
        if explained.is_empty() {
            continue;
        }
        let mut body = String::from("<p><a href=\"index.html\">index</a></p>\n");
        for ev in explained {
            let _ = writeln!(body, "<h2>{}</h2>", escape(&ev.code));
            for ((method, _), table) in attributions.iter().zip(&lookup) {
                if let Some(v) = table.get(&(doc.id.as_str(), ev.code.as_str())) {
                    if v.scores.len() != doc.len() {
                        continue;
                    }
                    let _ = writeln!(
                        body,
                        "<h3>{}</h3>\n<div class=\"doc\">{}</div>",
                        escape(method),
                        highlight(doc, &v.scores, &ev.tokens)
                    );
                }
            }
        }
        let name = format!("doc-{d}.html");
        std::fs::write(o.file(&format!("report/{name}"), "report")?, page(&doc.id, &body))?;
        let _ = writeln!(links, "<li><a href=\"{name}\">{}</a></li>", escape(&doc.id));
        rendered += 1;
    }
    let body = format!("{}<h2>Documents</h2>\n<ul>\n{links}</ul>\n", summary_tables(rows));
    std::fs::write(o.file("report/index.html", "report")?, page("Attribution report", &body))?;
    Ok(())
}
