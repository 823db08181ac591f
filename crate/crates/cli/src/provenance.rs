//! Provenance block echoed into every output: flat key=value pairs under
//! [section] headers, rendered as `# ` comment lines for CSV/text files and
//! as an XML comment for SVG. Contains no timestamps, so outputs stay
//! byte-reproducible.

#[derive(Clone, Debug, Default)]
pub struct Provenance {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Provenance {
    pub fn new() -> Provenance {
        Provenance::default()
    }

    pub fn section(mut self, name: &str) -> Provenance {
        self.sections.push((name.to_string(), Vec::new()));
        self
    }

    pub fn kv(mut self, key: &str, value: impl ToString) -> Provenance {
        self.sections
            .last_mut()
            .expect("kv before any section")
            .1
            .push((key.to_string(), value.to_string()));
        self
    }

    fn body(&self) -> String {
        let mut out = String::new();
        for (name, pairs) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in pairs {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    /// `# `-prefixed comment block for CSV and key=value outputs.
    pub fn comment_block(&self) -> String {
        self.body()
            .lines()
            .map(|l| format!("# {l}\n"))
            .collect()
    }

    /// XML comment block for SVG outputs.
    pub fn xml_comment(&self) -> String {
        format!("<!--\n{}-->\n", self.body())
    }
}
