//! Verifier stub for the exec protocol: reads one request per line and
//! answers every entity with all-zero scores.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use ear_core::verifier::{EntityScores, VerifyRequest, VerifyResponse};

fn main() -> io::Result<()> {
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: VerifyRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("ear-echo-verifier: bad request: {e}");
                std::process::exit(1);
            }
        };
        let scores: BTreeMap<String, EntityScores> = req
            .entities
            .into_iter()
            .map(|e| (e.surface, EntityScores::default()))
            .collect();
        writeln!(stdout, "{}", serde_json::to_string(&VerifyResponse { scores })?)?;
        stdout.flush()?;
    }
    Ok(())
}
