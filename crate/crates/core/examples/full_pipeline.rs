//! Runs the command-line pipeline in-process: simulate, ingest, fingerprint,
//! classify and report, each writing tables and a manifest.

use quicscope::cli;

fn main() {
    let out = std::env::temp_dir().join("quicscope-pipeline-example");
    let o = |sub: &str| out.join(sub).display().to_string();
    let prefixes = concat!(env!("CARGO_MANIFEST_DIR"), "/config/prefixes.tsv");
    let steps: Vec<Vec<String>> = vec![
        vec!["--out-dir".into(), o("sim"), "simulate".into()],
        vec![
            "--out-dir".into(),
            o("ingest"),
            "ingest".into(),
            "--capture".into(),
            o("sim/backscatter.pcap"),
            "--prefixes".into(),
            prefixes.into(),
        ],
        vec!["--out-dir".into(), o("fingerprint"), "fingerprint".into(), "--store".into(), o("ingest/store"), "--pairs-dir".into(), o("sim/pairs")],
        vec!["--out-dir".into(), o("classify"), "classify".into(), "--store".into(), o("ingest/store"), "--truth".into(), o("sim/truth.tsv")],
        vec!["--out-dir".into(), o("report"), "report".into(), "--store".into(), o("ingest/store"), "--pairs-dir".into(), o("sim/pairs")],
    ];
    for args in steps {
        let code = cli::run(std::iter::once("quicscope".to_string()).chain(args.iter().cloned()));
        println!("{:<12} exit {code}", args[2]);
        if code != cli::EXIT_OK {
            std::process::exit(code);
        }
    }
    let profiles = std::fs::read_to_string(out.join("fingerprint/profiles.tsv")).expect("profiles written");
    print!("{profiles}");
}
