//! Stand-alone mock SUT, for container images and manual testing.
//!
//! `SUT_PROFILE` selects the behavior (v1..v4 or fixed-<ms>), `BIND` the
//! listen address (default 0.0.0.0:8080).

use joulegate::mocksut::{MockSut, SutProfile};

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let profile = std::env::var("SUT_PROFILE").unwrap_or_else(|_| "v1".into());
    let bind = std::env::var("BIND").unwrap_or_else(|_| "0.0.0.0:8080".into());
    let profile = match SutProfile::by_name(&profile) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return std::process::ExitCode::from(2);
        }
    };
    match MockSut::serve(profile, &bind, None) {
        Ok(sut) => {
            log::info!("serving {} on {}", sut.profile().profile_id, sut.addr());
            loop {
                std::thread::park();
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(2)
        }
    }
}
