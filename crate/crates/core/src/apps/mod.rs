//! Example programs, written as step machines so their whole state fits
//! in the checkpoint blob.
//!
//! A step makes at most one API call and updates the state right after it
//! returns. Checkpoints land at call entries, so a saved state always
//! describes "about to make the next call".

mod pingpong;
mod prober;
mod ring;
mod selfsend;

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use pingpong::PingPong;
pub use prober::Prober;
pub use ring::Ring;
pub use selfsend::SelfSend;

use crate::plugin::{Context, LaunchEnv, PluginError, StateCallbacks};

pub trait App: Clone + Serialize + DeserializeOwned + 'static {
    /// Performs the next step. Returns `false` once the program is done.
    fn step(&mut self, ctx: &mut Context, out: &mut dyn Write) -> Result<bool, PluginError>;
}

/// Runs `app` to completion, restoring it first when `env` says so.
/// Returns the final state.
pub fn drive<A: App>(env: &LaunchEnv, app: A, out: &mut dyn Write) -> Result<A, PluginError> {
    let state = Rc::new(RefCell::new(app));
    let saved = Rc::clone(&state);
    let restored = Rc::clone(&state);
    let callbacks = StateCallbacks::new(
        move || serde_json::to_vec(&*saved.borrow()).expect("app state serializes"),
        move |blob| {
            *restored.borrow_mut() = serde_json::from_slice(blob).map_err(|e| e.to_string())?;
            Ok(())
        },
    );
    let mut ctx = Context::init(env, Some(callbacks))?;
    loop {
        // Work on a copy: the committed state is what a checkpoint taken
        // inside this step must see.
        let mut next = state.borrow().clone();
        let more = next.step(&mut ctx, out)?;
        *state.borrow_mut() = next;
        if !more {
            break;
        }
    }
    let fin = state.borrow().clone();
    Ok(fin)
}

pub(crate) fn emit(out: &mut dyn Write, line: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(line);
    let _ = out.write_all(b"\n");
    let _ = out.flush();
}

pub(crate) fn i32s_to_bytes(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn bytes_to_i32s(b: &[u8]) -> Vec<i32> {
    b.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Exit status for an example binary: a halt after checkpoint is a clean
/// stop.
pub fn exit_code(res: &Result<(), PluginError>) -> i32 {
    match res {
        Ok(()) | Err(PluginError::Halted) => 0,
        Err(_) => 1,
    }
}

/// Shared `main` of the example binaries.
pub fn main_with<A: App>(app: impl FnOnce(&[String]) -> Result<A, String>) -> i32 {
    let _ = env_logger::try_init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let app = match app(&args) {
        Ok(a) => a,
        Err(usage) => {
            eprintln!("usage: {usage}");
            return 2;
        }
    };
    let env = match LaunchEnv::from_env() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let res = drive(&env, app, &mut std::io::stdout()).map(|_| ());
    if let Err(e) = &res {
        if !matches!(e, PluginError::Halted) {
            eprintln!("error: {e}");
        }
    }
    exit_code(&res)
}
