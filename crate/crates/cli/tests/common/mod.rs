#![allow(dead_code)]

use icl_core::eval::render_prompt;
use icl_core::model::{Episode, EvalMode};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

pub const VLC_WORDS: [(&str, &str, &str); 13] = [
    ("material", "wooden", "metal"),
    ("size", "large", "small"),
    ("action", "running", "sitting"),
    ("color", "red", "blue"),
    ("state", "open", "closed"),
    ("rel_action", "riding", "pushing"),
    ("rel_spatial", "above", "below"),
    ("obj_large", "truck", "bus"),
    ("obj_small", "cup", "bowl"),
    ("obj_medium", "chair", "stool"),
    ("loc_center", "dog", "cat"),
    ("loc_margin", "lamp", "vase"),
    ("loc_mid", "bike", "cart"),
];

pub fn write_json(path: &Path, v: &Value) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// `<root>/vlc/<name>.json` with `n` items per partition.
pub fn write_vlc(root: &Path, n: usize) -> PathBuf {
    let dir = root.join("vlc");
    for (name, pos, neg) in VLC_WORDS {
        let items: Vec<Value> = (0..n)
            .map(|i| {
                json!([
                    format!("vg/{name}/{i:05}.jpg"),
                    {"POS": [format!("the {pos} thing number {i}")], "NEG": [format!("the {neg} thing number {i}")]}
                ])
            })
            .collect();
        write_json(&dir.join(format!("{name}.json")), &Value::Array(items));
    }
    dir
}

/// SEED-Bench style `seed.json` with `n` questions for each task.
pub fn write_seed(root: &Path, tasks: &[u32], n: usize) -> PathBuf {
    let mut items = Vec::new();
    for &task in tasks {
        for i in 0..n {
            let letters = ["A", "B", "C", "D"];
            items.push(json!({
                "question_id": format!("{task}_{i}"),
                "question": format!("Task {task} question {i}?"),
                "choice_a": format!("alpha {i}"),
                "choice_b": format!("beta {i}"),
                "choice_c": format!("gamma {i}"),
                "choice_d": format!("delta {i}"),
                "answer": letters[(i * 7 + task as usize) % 4],
                "data_id": format!("seed/t{task}/{i:05}.jpg"),
                "question_type_id": task,
            }));
        }
    }
    let path = root.join("seed").join("seed.json");
    write_json(&path, &Value::Array(items));
    path.parent().unwrap().to_path_buf()
}

/// `labels.jsonl` with `per_class` images for each of `classes` classes.
pub fn write_classification(root: &Path, dataset: &str, classes: usize, per_class: usize) -> PathBuf {
    let dir = root.join(dataset);
    std::fs::create_dir_all(&dir).unwrap();
    let mut text = String::new();
    for c in 0..classes {
        for i in 0..per_class {
            text.push_str(
                &json!({"image": format!("{dataset}/{c}/{i}.jpg"), "label": format!("Class {c}")}).to_string(),
            );
            text.push('\n');
        }
    }
    std::fs::write(dir.join("labels.jsonl"), text).unwrap();
    dir
}

pub fn write_manifest(path: &Path, source: &str, root: &Path, dataset: Option<&str>) -> PathBuf {
    let mut m = json!({"source": source, "root": root});
    if let Some(d) = dataset {
        m["dataset"] = json!(d);
    }
    write_json(path, &m);
    path.to_path_buf()
}

/// Fixture sources plus one manifest per source.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifests: Vec<PathBuf>,
}

impl Fixture {
    pub fn new(vlc_items: usize, seed_items: usize, datasets: &[(&str, usize, usize)]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("sources");
        let mut manifests = Vec::new();
        let vlc = write_vlc(&root, vlc_items);
        manifests.push(write_manifest(&dir.path().join("vlc.manifest.json"), "vlchecklist", &vlc, None));
        let seed = write_seed(&root, &[1, 2, 3, 4, 5, 6, 7, 8, 23], seed_items);
        manifests.push(write_manifest(&dir.path().join("seed.manifest.json"), "seed", &seed, None));
        for &(name, classes, per_class) in datasets {
            let d = write_classification(&root, name, classes, per_class);
            manifests.push(write_manifest(
                &dir.path().join(format!("{name}.manifest.json")),
                "classification",
                &d,
                Some(name),
            ));
        }
        Fixture { dir, manifests }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs `icl ingest` over every manifest into `records.jsonl`.
    pub fn ingest(&self) -> PathBuf {
        let out = self.path("records.jsonl");
        let mut args: Vec<String> = vec!["ingest".into(), "--out".into(), out.display().to_string()];
        for m in &self.manifests {
            args.push("--manifest".into());
            args.push(m.display().to_string());
        }
        let o = icl(&args);
        assert!(o.status.success(), "ingest failed: {}", String::from_utf8_lossy(&o.stderr));
        out
    }
}

pub fn icl<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl")).args(args).output().expect("run icl")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

/// Minimal HTTP/1.1 JSON server on localhost. One request per connection.
pub struct StubServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
    thread: Option<JoinHandle<()>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Value)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut length = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some((path, serde_json::from_slice(&body).unwrap_or(Value::Null)))
}

impl StubServer {
    pub fn start(handler: Arc<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (r, s) = (requests.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let handler = handler.clone();
                let r = r.clone();
                std::thread::spawn(move || {
                    let Some((path, body)) = read_request(&mut stream) else { return };
                    r.fetch_add(1, Ordering::SeqCst);
                    let (status, reply) = handler(&path, &body);
                    let text = reply.to_string();
                    let _ = write!(
                        stream,
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                        text.len()
                    );
                });
            }
        });
        StubServer { url: format!("http://{addr}"), requests, stop, addr, thread: Some(thread) }
    }

    pub fn count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn last_user(messages: &Value) -> String {
    messages.as_array().and_then(|m| m.last()).map(|m| m.to_string()).unwrap_or_default()
}

/// Answers every generation with the ground truth and scores the correct option of a
/// choice episode far above the others. Keyed by the rendered query turn.
pub fn ground_truth_echo(episodes: &[Episode]) -> Arc<Handler> {
    let mut answers: HashMap<String, (String, Option<String>)> = HashMap::new();
    for e in episodes {
        let prompt = render_prompt(e, 0).unwrap();
        let key = serde_json::to_value(prompt.messages.last().unwrap()).unwrap().to_string();
        let correct = match e.eval_mode {
            EvalMode::PerplexityChoice => e.answer_index().map(|i| e.options.as_ref().unwrap()[i].clone()),
            EvalMode::ExactMatch => None,
        };
        answers.insert(key, (e.ground_truth.clone(), correct));
    }
    Arc::new(move |path: &str, body: &Value| {
        let Some((gt, correct)) = answers.get(&last_user(&body["messages"])) else {
            return (404, json!({"error": "unknown query"}));
        };
        match path {
            "/chat/completions" => (200, json!({"choices": [{"message": {"role": "assistant", "content": gt}}]})),
            "/score" => {
                let hit = correct.as_deref() == body["continuation"].as_str();
                (200, json!({"token_logprobs": if hit { vec![-0.1, -0.2] } else { vec![-3.0, -4.0] }}))
            }
            _ => (404, json!({})),
        }
    })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    icl_core::jsonl::read(path).unwrap()
}

pub fn mix5_config(path: &Path, target: usize, seed: u64, replay: Option<&Path>) -> PathBuf {
    let replay_line = match replay {
        Some(p) => format!("llava_data = true\nreplay_source = {:?}\n", p.display().to_string()),
        None => "llava_data = false\n".into(),
    };
    let text = format!(
        "seed = {seed}\n\n[mix]\nid = \"mix5\"\n{replay_line}attributes = 45.45\nrelations = 15.15\ncategories = 36.36\ninstances = 3.04\n\
         open_questions = 39.40\nmultiple_choice = 42.42\ncaptioning = 18.18\ntarget_count = {target}\nseed = {seed}\njoint = \"fitted\"\n\n\
         [eval]\nk = 2\n"
    );
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}
