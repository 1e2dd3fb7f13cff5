use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{RngCore, SeedableRng};
use serde_json::Value;
use tempfile::TempDir;

use umstk::blockdev::FileDevice;
use umstk::fat32::check_volume;
use umstk::image::mount_partition;
use umstk_cli::{run, Outcome};

const CLOCK: &str = "2025-06-01T12:30:44";

fn umstk(args: &[&str]) -> Outcome {
    run(std::iter::once("umstk").chain(args.iter().copied()))
}

fn ok(args: &[&str]) -> String {
    let o = umstk(args);
    assert_eq!(o.code, 0, "{args:?}: {}", o.stderr);
    o.stdout
}

fn json(args: &[&str]) -> Value {
    let mut a = args.to_vec();
    a.push("--json");
    serde_json::from_str(&ok(&a)).unwrap()
}

fn image(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let p = dir.path().join(name);
    let mut args = vec![
        "mkimage",
        p.to_str().unwrap(),
        "--size",
        "40M",
        "--label",
        "TEST",
        "--clock",
        CLOCK,
    ];
    args.extend_from_slice(extra);
    ok(&args);
    p
}

fn assert_sound(img: &Path, partition: usize) {
    let dev = FileDevice::open_read_only(img, 512).unwrap();
    let (mut fs, _) = mount_partition(dev, partition).unwrap();
    fs.set_update_access(false);
    let report = check_volume(&mut fs).unwrap();
    assert!(report.is_clean(), "{report}");
}

#[test]
fn fresh_image_lists_empty() {
    let dir = TempDir::new().unwrap();
    let img = image(&dir, "a.img", &[]);
    let p = img.to_str().unwrap();
    assert_eq!(ok(&["ls", p, "/"]), "");
    assert_eq!(json(&["ls", p])["entries"], Value::Array(vec![]));
    assert_eq!(json(&["ls", p])["schema"], 1);
}

#[test]
fn put_get_round_trip_of_three_clusters() {
    let dir = TempDir::new().unwrap();
    let img = image(&dir, "a.img", &["--mbr"]);
    let p = img.to_str().unwrap();
    let cluster = json(&["info", p])["filesystem"]["cluster_size"]
        .as_u64()
        .unwrap() as usize;
    let mut data = vec![0u8; 3 * cluster];
    fill_random(&mut data);
    let src = dir.path().join("big.bin");
    std::fs::write(&src, &data).unwrap();
    ok(&["put", p, src.to_str().unwrap(), "/big.bin"]);
    let back = dir.path().join("back.bin");
    ok(&["get", p, "/BIG.BIN", back.to_str().unwrap()]);
    assert_eq!(std::fs::read(&back).unwrap(), data);
    let listing = json(&["ls", p, "/"]);
    assert_eq!(listing["entries"][0]["size"], data.len());
    assert_sound(&img, 0);
}

fn fill_random(buf: &mut [u8]) {
    rand::rngs::StdRng::seed_from_u64(42).fill_bytes(buf);
}

#[test]
fn info_reports_the_partition_table() {
    let dir = TempDir::new().unwrap();
    let img = image(&dir, "a.img", &["--mbr"]);
    let p = img.to_str().unwrap();
    let text = ok(&["info", p]);
    assert!(text.contains("0Ch"), "{text}");
    assert!(text.contains("2048"), "{text}");
    let v = json(&["info", p]);
    assert_eq!(v["partition_table"], "mbr");
    assert_eq!(v["partitions"][0]["type"], 0x0c);
    assert_eq!(v["partitions"][0]["first_lba"], 2048);
    assert_eq!(v["filesystem"]["hidden_sectors"], 2048);
    assert_eq!(v["filesystem"]["label"], "TEST");
    let fs = &v["filesystem"];
    assert_eq!(
        fs["free_bytes"].as_u64().unwrap(),
        fs["free_clusters"].as_u64().unwrap() * fs["cluster_size"].as_u64().unwrap()
    );

    let raw = image(&dir, "raw.img", &[]);
    let v = json(&["info", raw.to_str().unwrap()]);
    assert_eq!(v["partition_table"], "none");
    assert_eq!(v["filesystem"]["hidden_sectors"], 0);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let img = image(&dir, "a.img", &[]);
    let p = img.to_str().unwrap();
    let src = dir.path().join("x.txt");
    std::fs::write(&src, b"x").unwrap();

    let o = umstk(&["ls", p, "/missing"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("fat32:"), "{}", o.stderr);

    ok(&["mkdir", p, "/d"]);
    let o = umstk(&["mkdir", p, "/D"]);
    assert_eq!(o.code, 1, "{}", o.stderr);
    assert!(o.stderr.contains("already exists"), "{}", o.stderr);

    ok(&["put", p, src.to_str().unwrap(), "/d"]);
    assert_eq!(
        umstk(&["put", p, src.to_str().unwrap(), "/d/x.txt"]).code,
        1
    );
    ok(&["put", "--force", p, src.to_str().unwrap(), "/d/x.txt"]);
    assert_eq!(umstk(&["rm", p, "/d"]).code, 1);
    assert_eq!(umstk(&["mv", p, "/d", "/d/inner"]).code, 1);

    let o = umstk(&["ls", p, "--partition", "2"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("mbr:"), "{}", o.stderr);

    let junk = dir.path().join("junk.img");
    std::fs::write(&junk, vec![0u8; 1 << 20]).unwrap();
    let o = umstk(&["info", junk.to_str().unwrap()]);
    assert_eq!(o.code, 1, "{}", o.stderr);
    assert!(
        o.stderr.contains("fat32: not a FAT32 volume"),
        "{}",
        o.stderr
    );

    let o = umstk(&["ls", dir.path().join("nope.img").to_str().unwrap()]);
    assert_eq!(o.code, 1);
    assert_eq!(umstk(&["frobnicate"]).code, 1);
    assert_eq!(umstk(&["--help"]).code, 0);
    assert_sound(&img, 0);
}

/// The same command sequence, applied directly and through the emulated
/// device.
fn scripted(dir: &TempDir, name: &str, via_scsi: bool) -> Vec<u8> {
    let img = dir.path().join(name);
    let p = img.to_str().unwrap().to_string();
    let mut data = vec![0u8; 70_000];
    fill_random(&mut data);
    let src = dir.path().join(format!("{name}.src"));
    std::fs::write(&src, &data).unwrap();
    let s = src.to_str().unwrap();
    let mut steps: Vec<Vec<&str>> = vec![
        vec!["mkimage", &p, "--size", "40M", "--mbr", "--label", "SAME"],
        vec!["mkdir", "-p", &p, "/Photos/2025 Summer"],
        vec!["put", &p, s, "/Photos/2025 Summer/beach day.raw"],
        vec!["put", &p, s, "/notes.txt"],
        vec!["mv", &p, "/notes.txt", "/Photos/notes renamed.txt"],
        vec!["mv", &p, "/Photos/2025 Summer", "/"],
        vec!["rm", &p, "/Photos/notes renamed.txt"],
        vec!["label", &p, "CHANGED"],
        vec!["ls", &p, "/2025 Summer"],
        vec![
            "get",
            &p,
            "/2025 Summer/beach day.raw",
            dir.path().to_str().unwrap(),
        ],
        vec!["rm", "-r", &p, "/Photos"],
    ];
    for step in steps.iter_mut() {
        step.extend(["--clock", CLOCK]);
        if via_scsi {
            step.push("--via-scsi");
        }
        ok(step);
    }
    assert_sound(&img, 0);
    std::fs::read(&img).unwrap()
}

#[test]
fn via_scsi_matches_direct_access() {
    let dir = TempDir::new().unwrap();
    let direct = scripted(&dir, "direct.img", false);
    let scsi = scripted(&dir, "scsi.img", true);
    assert!(direct == scsi, "images differ");
}

#[test]
fn binary_runs_with_log_level() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("b.img");
    let out = Command::new(env!("CARGO_BIN_EXE_umstk"))
        .args([
            "mkimage",
            img.to_str().unwrap(),
            "--size",
            "2M",
            "--via-scsi",
        ])
        .env("UMSTK_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("formatted"));
    let out = Command::new(env!("CARGO_BIN_EXE_umstk"))
        .args(["rm", img.to_str().unwrap(), "/none"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(
        String::from_utf8_lossy(&out.stderr),
        "umstk: fat32: /none: no such file or directory\n"
    );
}

#[test]
fn selftest_passes() {
    let v = json(&["selftest", "--bytes", "1M"]);
    assert_eq!(v["passed"], true);
    assert_eq!(v["scenarios"].as_array().unwrap().len(), 9);
}
