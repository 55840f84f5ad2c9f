//! Dataset and checkpoint codecs: byte-identical round trips and structured
//! errors on damaged input.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trajkit::model::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, HeadKind, Model, ModelConfig};
use trajkit::scene::{decode_dataset, encode_dataset, generate_dataset, read_dataset, write_dataset, RasterConfig, ShiftConfig, SplitTag};
use trajkit::{Error, Result};

use crate::{Ctx, Outcome};

#[derive(Default)]
struct Damage {
    cases: usize,
    panics: usize,
}

impl Damage {
    fn probe<T>(&mut self, f: impl FnOnce() -> Result<T>) {
        self.cases += 1;
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            self.panics += 1;
        }
    }
}

fn truncation_points(len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len.min(300)).collect();
    v.extend((0..300).map(|_| r.gen_range(0..len)));
    v.push(len - 1);
    v
}

fn dataset(dir: &std::path::Path, r: &mut ChaCha8Rng) -> (Vec<String>, bool, Damage) {
    let raster = RasterConfig::with_size(16);
    let mut data = generate_dataset(&ShiftConfig::in_domain(), &raster, SplitTag::InDomain, 0, 6).unwrap();
    data.extend(generate_dataset(&ShiftConfig::shifted(), &raster, SplitTag::Shifted, 500, 4).unwrap());

    let mut first = Vec::new();
    encode_dataset(&data, &mut first).unwrap();
    let back = decode_dataset(&first).unwrap();
    let mut second = Vec::new();
    encode_dataset(&back, &mut second).unwrap();

    let (a, b) = (dir.join("a.trjk"), dir.join("b.trjk"));
    write_dataset(&data, &a).unwrap();
    write_dataset(&read_dataset(&a).unwrap(), &b).unwrap();
    let files_equal = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && std::fs::read(&a).unwrap() == first;
    let round = first == second && back == data && files_equal;

    let mut bad_magic = first.clone();
    bad_magic[0] ^= 0xFF;
    let magic = matches!(decode_dataset(&bad_magic), Err(Error::Magic { .. }));
    let mut bad_version = first.clone();
    bad_version[4] = 99;
    let version = matches!(decode_dataset(&bad_version), Err(Error::Version { .. }));

    let mut dmg = Damage::default();
    let mut truncated_ok = true;
    for n in truncation_points(first.len(), r) {
        let bytes = &first[..n];
        truncated_ok &= catch_unwind(|| decode_dataset(bytes).is_err()).unwrap_or(false);
        dmg.probe(|| decode_dataset(bytes));
    }
    for _ in 0..300 {
        let mut b = first.clone();
        let i = r.gen_range(0..b.len().min(64));
        b[i] = r.gen();
        dmg.probe(|| decode_dataset(&b));
    }
    let trunc_file = dir.join("t.trjk");
    std::fs::write(&trunc_file, &first[..first.len() / 2]).unwrap();
    let file_err = matches!(read_dataset(&trunc_file), Err(Error::Format(_)));
    let missing = matches!(read_dataset(&dir.join("missing.trjk")), Err(Error::Io(_)));

    let lines = vec![
        format!("dataset: {} bytes, encode/decode/encode identical: {round}", first.len()),
        format!("dataset: corrupted magic -> Magic error: {magic}, bad version -> Version error: {version}"),
        format!("dataset: truncated file -> Format error: {file_err}, missing file -> Io error: {missing}"),
        format!("dataset: {} damaged inputs, every truncation rejected: {truncated_ok}, panics: {}", dmg.cases, dmg.panics),
    ];
    (lines, round && magic && version && truncated_ok && file_err && missing, dmg)
}

fn checkpoint(dir: &std::path::Path, r: &mut ChaCha8Rng) -> (Vec<String>, bool, Damage) {
    let mut ok = true;
    let mut lines = Vec::new();
    let mut dmg = Damage::default();
    let configs = [
        ModelConfig::micro(),
        ModelConfig {
            head: HeadKind::Dim,
            attention: false,
            raster_size: 32,
            ..ModelConfig::micro()
        },
    ];
    for (i, cfg) in configs.into_iter().enumerate() {
        let m32 = Model::<f32>::new(cfg.clone(), 7 + i as u64).unwrap();
        let m64 = Model::<f64>::new(cfg.clone(), 7 + i as u64).unwrap();
        let a = encode_checkpoint(&m32).unwrap();
        let b = encode_checkpoint(&decode_checkpoint::<f32>(&a).unwrap()).unwrap();
        let c = encode_checkpoint(&m64).unwrap();
        let d = encode_checkpoint(&decode_checkpoint::<f64>(&c).unwrap()).unwrap();
        let path = dir.join(format!("m{i}.ckpt"));
        save_checkpoint(&m32, &path).unwrap();
        let loaded: Model<f32> = load_checkpoint(&path).unwrap();
        let path2 = dir.join(format!("m{i}b.ckpt"));
        save_checkpoint(&loaded, &path2).unwrap();
        let round = a == b && c == d && std::fs::read(&path).unwrap() == a && std::fs::read(&path2).unwrap() == a;

        let mut bad = a.clone();
        bad[1] ^= 0x20;
        let magic = matches!(decode_checkpoint::<f32>(&bad), Err(Error::Magic { .. }));

        let mut truncated_ok = true;
        for n in truncation_points(a.len(), r) {
            let bytes = &a[..n];
            truncated_ok &= catch_unwind(|| decode_checkpoint::<f32>(bytes).is_err()).unwrap_or(false);
            dmg.probe(|| decode_checkpoint::<f32>(bytes));
        }
        // CRC covers every byte, so any single flip is rejected.
        let mut flips_ok = true;
        for _ in 0..300 {
            let mut bad = a.clone();
            let j = r.gen_range(0..bad.len());
            bad[j] ^= 1 << r.gen_range(0..8);
            flips_ok &= catch_unwind(|| decode_checkpoint::<f32>(&bad).is_err()).unwrap_or(false);
            dmg.probe(|| decode_checkpoint::<f32>(&bad));
        }
        lines.push(format!(
            "checkpoint {}: {} bytes, f32/f64 round trips identical: {round}, magic error: {magic}, truncations rejected: {truncated_ok}, bit flips rejected: {flips_ok}",
            cfg.label(),
            a.len()
        ));
        ok &= round && magic && truncated_ok && flips_ok;
    }
    (lines, ok, dmg)
}

pub fn run(_: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(23);
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let (mut lines, ds_ok, d1) = dataset(dir.path(), &mut r);
    let (ck_lines, ck_ok, d2) = checkpoint(dir.path(), &mut r);
    std::panic::set_hook(prev);
    lines.extend(ck_lines);
    let cases = d1.cases + d2.cases;
    let panics = d1.panics + d2.panics;
    Outcome::new(
        ds_ok && ck_ok && panics == 0,
        format!("dataset and checkpoint round trips byte-identical; {cases} damaged inputs, {panics} panics"),
    )
    .detail(lines)
}
