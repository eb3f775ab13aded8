//! Language-distribution estimation. Detection is behind [`Detector`]; the
//! built-in [`HeuristicDetector`] combines Unicode-script counts with
//! stopword and diacritic scores over twenty languages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Classifies a document into a language tag.
pub trait Detector {
    fn classify(&self, text: &str) -> String;
}

impl<F: Fn(&str) -> String> Detector for F {
    fn classify(&self, text: &str) -> String {
        self(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub language: String,
    pub count: usize,
    /// Share of documents in percent, two decimals.
    pub percent: String,
}

/// Per-document classification, reported in descending share (ties by
/// tag).
pub fn language_distribution<'a, D: Detector + ?Sized>(
    docs: impl IntoIterator<Item = &'a str>,
    detector: &D,
) -> Vec<LanguageShare> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for d in docs {
        *counts.entry(detector.classify(d)).or_default() += 1;
        total += 1;
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows.into_iter()
        .map(|(language, count)| LanguageShare {
            percent: format!("{:.2}", 100.0 * count as f64 / total as f64),
            language,
            count,
        })
        .collect()
}

/// Languages the heuristic detector can emit, plus `und` for text with no
/// usable signal.
pub const LANGUAGES: [&str; 20] = [
    "en", "hi", "sw", "ru", "es", "ar", "zh", "tr", "ur", "pt", "vi", "ja", "fr", "bg", "it", "nl", "pl", "de", "th", "el",
];

const LATIN_STOPWORDS: &[(&str, &str)] = &[
    ("en", "the and is of to in that it was for with are this have you they from be on not what we he she his her been were will would there their"),
    ("sw", "na ya wa kwa ni za la katika hii kuwa yake watu sana hiyo lakini pia au huu wake mimi wewe yeye sisi tu kama ili alikuwa leo kila siku wana nyumbani"),
    ("es", "el la de que y en los las es por un una con para del se no muy pero está como más su al lo le hay son también"),
    ("pt", "o a de que e do da em um uma os as não para com é dos das no na mais muito está são você ele ela foi seu sua também"),
    ("fr", "le la les de des et est un une du en que qui dans pour pas sur au avec ce il elle nous vous je très sont mais aux cette"),
    ("it", "il la di che e è un una per non del della sono con gli le lo nel anche ma molto questo come io lui lei siamo alla delle"),
    ("nl", "de het een en van is dat op te in niet ik je met zijn voor er maar ook dit wij hij zij naar heeft wordt veel bij"),
    ("de", "der die das und ist nicht ein eine ich zu mit sich auf für den dem von es sie wir auch sehr haben wird im"),
    ("pl", "i w nie na się z jest to że do o jak ale co tak po od jego są był była mnie bardzo czy który która jest"),
    ("tr", "ve bir bu da de için ile çok ne ben sen o var yok gibi daha olarak değil mi ama şey her biz onlar bugün"),
    ("vi", "và của là có không những một các được trong cho người này với đã tôi bạn chúng rất nhà đi hôm nay"),
];

/// Characters that strongly suggest one Latin-script language.
const LATIN_MARKERS: &[(&str, &str)] = &[
    ("es", "ñ¿¡"),
    ("pt", "ãõ"),
    ("fr", "èœëîû"),
    ("de", "ßä"),
    ("tr", "ışğ"),
    ("pl", "ąęłśźżćń"),
    ("vi", "ơưđạảấầẩẫậắằẳẵặẹẻẽếềểễệỉịọỏốồổỗộớờởỡợụủứừửữựỳỵỷỹ"),
];

const CYRILLIC_STOPWORDS: &[(&str, &str)] = &[
    ("ru", "что это как он она был было его который очень мы вы они в с к по из у же бы только"),
    ("bg", "се за от е са това като които който беше ще във със много има тя той те ли при"),
];

/// Script-level buckets used before word scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Script {
    Latin,
    Cyrillic,
    Arabic,
    Devanagari,
    Thai,
    Greek,
    Han,
    Kana,
}

fn script_of(c: char) -> Option<Script> {
    let u = c as u32;
    Some(match u {
        0x41..=0x5A | 0x61..=0x7A | 0xC0..=0x24F | 0x1E00..=0x1EFF => Script::Latin,
        0x400..=0x4FF => Script::Cyrillic,
        0x600..=0x6FF | 0x750..=0x77F | 0xFB50..=0xFDFF | 0xFE70..=0xFEFF => Script::Arabic,
        0x900..=0x97F => Script::Devanagari,
        0xE00..=0xE7F => Script::Thai,
        0x370..=0x3FF | 0x1F00..=0x1FFF => Script::Greek,
        0x3040..=0x30FF | 0x31F0..=0x31FF | 0xFF66..=0xFF9F => Script::Kana,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF => Script::Han,
        _ => return None,
    })
}

/// Stopword/diacritic heuristic over the twenty tags in [`LANGUAGES`].
#[derive(Debug, Clone)]
pub struct HeuristicDetector {
    latin: Vec<(&'static str, HashMap<&'static str, f64>)>,
    cyrillic: Vec<(&'static str, HashMap<&'static str, f64>)>,
}

fn weighted(lists: &[(&'static str, &'static str)]) -> Vec<(&'static str, HashMap<&'static str, f64>)> {
    // A word shared by k languages contributes 1/k to each.
    let mut owners: HashMap<&str, usize> = HashMap::new();
    for (_, words) in lists {
        let mut seen: Vec<&str> = words.split_whitespace().collect();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            *owners.entry(w).or_default() += 1;
        }
    }
    lists
        .iter()
        .map(|(lang, words)| (*lang, words.split_whitespace().map(|w| (w, 1.0 / owners[w] as f64)).collect()))
        .collect()
}

impl Default for HeuristicDetector {
    fn default() -> Self {
        Self {
            latin: weighted(LATIN_STOPWORDS),
            cyrillic: weighted(CYRILLIC_STOPWORDS),
        }
    }
}

fn best(scores: impl IntoIterator<Item = (&'static str, f64)>, fallback: &'static str) -> &'static str {
    let mut top = (fallback, 0.0);
    for (lang, s) in scores {
        if s > top.1 {
            top = (lang, s);
        }
    }
    top.0
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl HeuristicDetector {
    fn score_words(
        table: &[(&'static str, HashMap<&'static str, f64>)],
        words: &[String],
    ) -> Vec<(&'static str, f64)> {
        table
            .iter()
            .map(|(lang, sw)| (*lang, words.iter().filter_map(|w| sw.get(w.as_str())).sum()))
            .collect()
    }

    fn latin(&self, text: &str) -> &'static str {
        let lower = text.to_lowercase();
        let mut scores = Self::score_words(&self.latin, &words(text));
        for (lang, marks) in LATIN_MARKERS {
            let hits = lower.chars().filter(|c| marks.contains(*c)).count();
            if let Some(s) = scores.iter_mut().find(|(l, _)| l == lang) {
                s.1 += 2.0 * hits as f64;
            }
        }
        best(scores, "en")
    }

    fn cyrillic(&self, text: &str) -> &'static str {
        let lower = text.to_lowercase();
        let mut scores = Self::score_words(&self.cyrillic, &words(text));
        let ru_letters = lower.chars().filter(|c| "ыэё".contains(*c)).count();
        let bg_letters = lower.chars().filter(|&c| c == 'ъ').count();
        scores[0].1 += 2.0 * ru_letters as f64;
        scores[1].1 += 2.0 * bg_letters as f64;
        best(scores, "ru")
    }

    fn arabic(text: &str) -> &'static str {
        let urdu = text.chars().filter(|c| "ےںہھٹڈڑکیگ".contains(*c)).count();
        let arabic = text.chars().filter(|c| "كيةىأإ".contains(*c)).count();
        if urdu > arabic {
            "ur"
        } else {
            "ar"
        }
    }
}

impl Detector for HeuristicDetector {
    fn classify(&self, text: &str) -> String {
        let mut counts: HashMap<Script, usize> = HashMap::new();
        for c in text.chars() {
            if let Some(s) = script_of(c) {
                *counts.entry(s).or_default() += 1;
            }
        }
        let count = |s| counts.get(&s).copied().unwrap_or(0);
        // Japanese mixes kana with kanji; any notable kana share decides it.
        let cjk = count(Script::Han) + count(Script::Kana);
        if cjk > 0 && cjk >= counts.values().max().copied().unwrap_or(0) {
            return if count(Script::Kana) * 10 >= cjk { "ja" } else { "zh" }.into();
        }
        let dominant = counts.iter().max_by_key(|(s, n)| (**n, **s as u8)).map(|(s, _)| *s);
        match dominant {
            None => "und",
            Some(Script::Latin) => self.latin(text),
            Some(Script::Cyrillic) => self.cyrillic(text),
            Some(Script::Arabic) => Self::arabic(text),
            Some(Script::Devanagari) => "hi",
            Some(Script::Thai) => "th",
            Some(Script::Greek) => "el",
            Some(Script::Han) => "zh",
            Some(Script::Kana) => "ja",
        }
        .into()
    }
}
