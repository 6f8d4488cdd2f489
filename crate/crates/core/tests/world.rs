mod common;

use std::collections::HashSet;
use std::fs;
use std::net::TcpStream;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use pmpcr::ckpt::{read_image, write_image, CheckpointImage, Manifest};
use pmpcr::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, Totals};
use pmpcr::launcher::control::CkptOutcome;
use pmpcr::launcher::local::{LocalConfig, LocalWorld};
use pmpcr::plugin::{get_count, Context, Count, LaunchEnv, Mode, PluginError, ReplayLogEntry};
use pmpcr::proto::*;
use pmpcr::proxy::{Proxy, ProxyConfig, ProxyError, ProxyExit};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn world(ws: u32) -> (tempfile::TempDir, LocalConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LocalConfig::new(ws, dir.path());
    (dir, cfg)
}

fn ints(v: &[i32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

#[test]
fn three_ranks_form_a_world() {
    let (_d, cfg) = world(3);
    let out = LocalWorld::start(&cfg).unwrap().run(|_, env| {
        let mut ctx = Context::init(&env, None)?;
        let w = ctx.comm_world();
        let answer = (ctx.comm_rank(w)?, ctx.comm_size(w)?);
        ctx.finalize()?;
        Ok::<_, PluginError>(answer)
    });
    let got: Vec<_> = out.ranks.into_iter().map(Result::unwrap).collect();
    assert_eq!(got, vec![(RankId(0), 3), (RankId(1), 3), (RankId(2), 3)]);
    assert!(out.proxies.iter().all(|p| matches!(p, Ok(ProxyExit::Finalized))));
    let report = out.coordinator.unwrap();
    assert!(report.checkpoints.is_empty() && report.aborted.is_empty());
}

#[test]
fn duplicate_rank_registration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let coord = Coordinator::bind(CoordinatorConfig::new(2, dir.path())).unwrap();
    let addr = coord.local_addr();
    let coord = thread::spawn(move || coord.run());
    let first = Proxy::bind(ProxyConfig::new(RankId(0), addr)).unwrap();
    let first_plugin = first.plugin_addr();
    let first = thread::spawn(move || first.run());
    // Give the first registration time to land.
    thread::sleep(Duration::from_millis(200));

    let dup = Proxy::bind(ProxyConfig::new(RankId(0), addr)).unwrap().run();
    match dup {
        Err(e @ ProxyError::Rejected(_)) => assert_eq!(e.exit_code(), 10),
        other => panic!("duplicate registration was not rejected: {other:?}"),
    }

    // The proxy binary reports the same refusal through its exit status.
    let status = Command::new(env!("CARGO_BIN_EXE_pmpcr-proxy"))
        .args(["--rank", "0", "--coordinator", &addr.to_string()])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(10));

    // Complete the world so every thread ends.
    let second = Proxy::bind(ProxyConfig::new(RankId(1), addr)).unwrap();
    let second_plugin = second.plugin_addr();
    let second = thread::spawn(move || second.run());
    let ranks: Vec<_> = [first_plugin, second_plugin]
        .into_iter()
        .map(|ep| {
            thread::spawn(move || {
                let mut ctx = Context::init(&LaunchEnv::fresh(ep), None)?;
                ctx.finalize()
            })
        })
        .collect();
    for r in ranks {
        r.join().unwrap().unwrap();
    }
    assert!(matches!(first.join().unwrap(), Ok(ProxyExit::Finalized)));
    assert!(matches!(second.join().unwrap(), Ok(ProxyExit::Finalized)));
    coord.join().unwrap().unwrap();
}

/// Established loopback connections whose local port is one of `ports`.
fn accepted_links(ports: &HashSet<u16>) -> usize {
    let table = fs::read_to_string("/proc/net/tcp").unwrap();
    table
        .lines()
        .skip(1)
        .filter(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            let port = cols[1].rsplit(':').next().and_then(|p| u16::from_str_radix(p, 16).ok());
            cols[3] == "01" && port.is_some_and(|p| ports.contains(&p))
        })
        .count()
}

#[test]
fn four_ranks_build_six_peer_links() {
    let dir = tempfile::tempdir().unwrap();
    let coord = Coordinator::bind(CoordinatorConfig::new(4, dir.path())).unwrap();
    let addr = coord.local_addr();
    let coord = thread::spawn(move || coord.run());
    let mut peer_ports = HashSet::new();
    let mut plugins = Vec::new();
    let mut proxies = Vec::new();
    for r in 0..4 {
        let p = Proxy::bind(ProxyConfig::new(RankId(r), addr)).unwrap();
        peer_ports.insert(p.peer_addr().port());
        plugins.push(p.plugin_addr());
        proxies.push(thread::spawn(move || p.run()));
    }
    let formed = Arc::new(std::sync::Barrier::new(5));
    let counted = Arc::new(std::sync::Barrier::new(5));
    let ranks: Vec<_> = plugins
        .into_iter()
        .map(|ep| {
            let (formed, counted) = (formed.clone(), counted.clone());
            thread::spawn(move || {
                let mut ctx = Context::init(&LaunchEnv::fresh(ep), None)?;
                formed.wait();
                counted.wait();
                ctx.finalize()
            })
        })
        .collect();
    formed.wait();
    let links = accepted_links(&peer_ports);
    counted.wait();
    for r in ranks {
        r.join().unwrap().unwrap();
    }
    for p in proxies {
        p.join().unwrap().unwrap();
    }
    coord.join().unwrap().unwrap();
    assert_eq!(links, 6, "a world of 4 needs one link per unordered pair");
}

#[test]
fn finalize_returns_only_after_every_rank_entered() {
    let (_d, cfg) = world(4);
    let out = LocalWorld::start(&cfg).unwrap().run(|rank, env| {
        let mut ctx = Context::init(&env, None)?;
        thread::sleep(Duration::from_millis(120 * (3 - rank.0 as u64)));
        let entered = Instant::now();
        ctx.finalize()?;
        Ok::<_, PluginError>((entered, Instant::now()))
    });
    let times: Vec<_> = out.ranks.into_iter().map(Result::unwrap).collect();
    let last_entry = times.iter().map(|t| t.0).max().unwrap();
    for (r, (_, returned)) in times.iter().enumerate() {
        assert!(*returned >= last_entry, "rank {r} left finalize before the last rank entered it");
    }
}

#[test]
fn finalize_twice_is_a_usage_error() {
    let (_d, cfg) = world(1);
    let out = LocalWorld::start(&cfg).unwrap().run(|_, env| {
        let mut ctx = Context::init(&env, None).unwrap();
        ctx.finalize().unwrap();
        ctx.finalize()
    });
    assert!(matches!(out.ranks[0], Err(PluginError::Usage(_))));
}

#[test]
fn iprobe_sees_a_message_already_buffered_at_the_proxy() {
    let (_d, cfg) = world(2);
    let out = LocalWorld::start(&cfg).unwrap().run(|rank, env| {
        let mut ctx = Context::init(&env, None)?;
        let w = ctx.comm_world();
        let mut seen = None;
        if rank.0 == 0 {
            ctx.send(&ints(&[10, 20, 30]), 3, Datatype::Int32, RankId(1), Tag(3), w)?;
            ctx.send(&ints(&[0]), 1, Datatype::Int32, RankId(1), Tag(9), w)?;
        } else {
            // The marker follows the data on the same channel, so once it
            // arrives the data is buffered.
            ctx.recv(1, Datatype::Int32, RankId(0).into(), Tag(9), w)?;
            let st = ctx.iprobe(RankId(0).into(), Tag(3), w)?.expect("buffered message visible");
            let probed = ctx.probe(SourceSelector::Any, Tag::ANY, w)?;
            assert_eq!(st, probed);
            assert_eq!(get_count(&st, Datatype::Int32), Count::Exact(3));
            assert_eq!(get_count(&st, Datatype::Int64), Count::Undefined);
            let (data, got) = ctx.recv(3, Datatype::Int32, SourceSelector::Any, Tag::ANY, w)?;
            assert_eq!(got, st);
            assert_eq!(data, ints(&[10, 20, 30]));
            assert!(ctx.iprobe(SourceSelector::Any, Tag::ANY, w)?.is_none());
            seen = Some(st);
        }
        ctx.finalize()?;
        Ok::<_, PluginError>(seen)
    });
    let st = out.ranks[1].as_ref().unwrap().unwrap();
    assert_eq!((st.source, st.tag, st.payload_bytes), (RankId(0), Tag(3), 12));
}

#[test]
fn self_send_is_received() {
    let (_d, cfg) = world(1);
    let out = LocalWorld::start(&cfg).unwrap().run(|_, env| {
        let mut ctx = Context::init(&env, None)?;
        let w = ctx.comm_world();
        ctx.send(b"hi!", 3, Datatype::Char, RankId(0), Tag(1), w)?;
        let (data, st) = ctx.recv(8, Datatype::Char, RankId(0).into(), Tag(1), w)?;
        ctx.finalize()?;
        Ok::<_, PluginError>((data, st.payload_bytes))
    });
    assert_eq!(out.ranks[0].as_ref().unwrap(), &(b"hi!".to_vec(), 3));
}

#[test]
fn invalid_arguments_fail_without_reaching_the_proxy() {
    let (_d, cfg) = world(2);
    let out = LocalWorld::start(&cfg).unwrap().run(|_, env| {
        let mut ctx = Context::init(&env, None).unwrap();
        let w = ctx.comm_world();
        let before = ctx.stats().frames_sent;
        let bad_rank = ctx.send(&ints(&[1]), 1, Datatype::Int32, RankId(2), Tag(0), w);
        let bad_tag = ctx.send(&ints(&[1]), 1, Datatype::Int32, RankId(0), Tag(-1), w);
        let bad_size = ctx.send(&ints(&[1]), 2, Datatype::Int32, RankId(0), Tag(0), w);
        let bad_comm = ctx.comm_size(pmpcr::plugin::CommHandle { virtual_id: 7, size: 2 });
        let bad_src = ctx.iprobe(SourceSelector::Rank(RankId(5)), Tag::ANY, w);
        let after = ctx.stats().frames_sent;
        ctx.finalize().unwrap();
        assert!(matches!(bad_rank, Err(PluginError::InvalidRank(_))));
        assert!(matches!(bad_tag, Err(PluginError::InvalidTag(-1))));
        assert!(matches!(bad_size, Err(PluginError::Size { expected: 8, actual: 4 })));
        assert!(matches!(bad_comm, Err(PluginError::InvalidComm(7))));
        assert!(matches!(bad_src, Err(PluginError::InvalidRank(_))));
        after - before
    });
    assert_eq!(out.ranks, vec![0, 0]);
}

#[test]
fn truncated_receive_consumes_the_message() {
    let (_d, cfg) = world(2);
    let out = LocalWorld::start(&cfg).unwrap().run(|rank, env| {
        let mut ctx = Context::init(&env, None).unwrap();
        let w = ctx.comm_world();
        let mut res = None;
        if rank.0 == 0 {
            ctx.send(&ints(&[1, 2, 3, 4]), 4, Datatype::Int32, RankId(1), Tag(0), w).unwrap();
            ctx.send(&ints(&[5]), 1, Datatype::Int32, RankId(1), Tag(0), w).unwrap();
        } else {
            let first = ctx.recv(2, Datatype::Int32, SourceSelector::Any, Tag(0), w);
            assert!(matches!(first, Err(PluginError::Truncation { capacity: 8, actual: 16 })));
            res = Some(ctx.recv(2, Datatype::Int32, SourceSelector::Any, Tag(0), w).unwrap().0);
        }
        ctx.finalize().unwrap();
        res
    });
    assert_eq!(out.ranks[1], Some(ints(&[5])));
}

#[test]
fn quiescent_world_drains_in_two_rounds() {
    let (_d, mut cfg) = world(2);
    cfg.ckpt_after_call = Some(0);
    let plans = Arc::new(vec![vec![Op::Compute { micros: 1000 }, Op::Finalize], vec![Op::Finalize]]);
    let out = run_traffic(LocalWorld::start(&cfg).unwrap(), plans);
    for r in &out.ranks {
        assert!(r.is_ok());
    }
    let report = out.coordinator.unwrap();
    assert_eq!(report.checkpoints.len(), 1);
    let proof = &report.checkpoints[0].drain;
    assert_eq!(proof.first, Totals { sent: 0, received: 0 });
    assert_eq!(proof.rounds, 2, "one balanced round plus its confirmation");
}

#[test]
fn in_flight_message_is_drained_into_the_receiver_cache() {
    let (_d, mut cfg) = world(2);
    cfg.forward_delay = Duration::from_millis(300);
    // Rank 0 asks for the checkpoint on entry to finalize, right after the
    // send was handed to its proxy.
    cfg.ckpt_after_call = Some(1);
    let plans = Arc::new(vec![
        vec![Op::Send { dest: 1, tag: 4, len: 2 }, Op::Finalize],
        vec![Op::Recv { src: None, tag: None }, Op::Finalize],
    ]);
    let out = run_traffic(LocalWorld::start(&cfg).unwrap(), plans);
    let finals: Vec<Traffic> = out.ranks.into_iter().map(Result::unwrap).collect();
    assert_eq!(finals[1].consumed_from(0), 1);
    assert_eq!(finals[1].disorder, None);
    let report = out.coordinator.unwrap();
    let rec = &report.checkpoints[0];
    assert_eq!(rec.drain.first, Totals { sent: 1, received: 0 });
    assert!(rec.drain.rounds >= 3);
    let audit = audit_cut(&rec.manifest).unwrap();
    assert_eq!(audit, CutAudit { sent: 1, consumed: 0, cached: 1, in_flight: 0, duplicated_channels: 0 });
    let img = read_image(&Manifest::read(&rec.manifest).unwrap().images[1]).unwrap();
    assert_eq!(img.cache.len(), 1);
    assert_eq!(img.cache[0].tag, Tag(4));
}

#[test]
fn randomized_traffic_survives_checkpoint_and_restart() {
    for seed in 0..6u64 {
        let mut rng = StdRng::seed_from_u64(0xC0FFEE + seed);
        let ws = 2 + (seed % 3) as u32;
        let plans = Arc::new(traffic_plans(&mut rng, ws));
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = LocalConfig::new(ws, dir.path());
        cfg.forward_delay = Duration::from_millis(seed % 3);
        cfg.ckpt_after_call = Some(seed * 3 % calls_in(&plans[0]));
        cfg.halt_after_ckpt = true;
        let first = run_traffic(LocalWorld::start(&cfg).unwrap(), plans.clone());
        assert!(first.ranks.iter().all(|r| matches!(r, Err(PluginError::Halted))));
        let manifest = first.coordinator.unwrap().checkpoints[0].manifest.clone();
        assert_eq!(audit_cut(&manifest).unwrap().in_flight, 0);

        let cfg = LocalConfig::new(ws, dir.path());
        let second = run_traffic(LocalWorld::restart(&cfg, &manifest).unwrap(), plans.clone());
        let finals: Vec<Traffic> = second.ranks.into_iter().map(Result::unwrap).collect();
        for (d, t) in finals.iter().enumerate() {
            assert_eq!(t.disorder, None, "seed {seed}");
            for (s, sender) in finals.iter().enumerate() {
                let sent: u64 = sender.sent_to[d].iter().sum();
                assert_eq!(t.consumed_from(s), sent, "seed {seed}: channel {s}->{d}");
            }
        }
    }
}

#[test]
fn restore_rebuilds_the_saved_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = LocalConfig::new(2, dir.path());
    cfg.forward_delay = Duration::from_millis(100);
    cfg.ckpt_after_call = Some(2);
    cfg.halt_after_ckpt = true;
    let plans = Arc::new(vec![
        vec![Op::Send { dest: 1, tag: 1, len: 3 }, Op::Send { dest: 1, tag: 2, len: 1 }, Op::Finalize],
        vec![Op::Recv { src: None, tag: None }, Op::Recv { src: None, tag: None }, Op::Finalize],
    ]);
    let first = run_traffic(LocalWorld::start(&cfg).unwrap(), plans);
    let manifest = first.coordinator.unwrap().checkpoints[0].manifest.clone();
    let m = Manifest::read(&manifest).unwrap();

    let world = LocalWorld::restart(&LocalConfig::new(2, dir.path()), &manifest).unwrap();
    let images: Vec<CheckpointImage> = m.images.iter().map(|p| read_image(p).unwrap()).collect();
    let out = world.run(move |_, env| {
        let blob = Arc::new(Mutex::new(None));
        let sink = blob.clone();
        let cb = pmpcr::plugin::StateCallbacks::new(Vec::new, move |b| {
            *sink.lock().unwrap() = Some(b.to_vec());
            Ok(())
        });
        let mut ctx = Context::init(&env, Some(cb)).unwrap();
        assert_eq!(ctx.mode(), Mode::Restored);
        let view = (
            ctx.rank(),
            ctx.world_size(),
            ctx.counters().clone(),
            ctx.replay_log().entries().to_vec(),
            ctx.cache().to_vec(),
            blob.lock().unwrap().clone().unwrap(),
        );
        // Drain whatever the image cached so the world can finish.
        let w = ctx.comm_world();
        for _ in 0..ctx.cache().len() {
            ctx.recv(16, Datatype::Int32, SourceSelector::Any, Tag::ANY, w).unwrap();
        }
        ctx.finalize().unwrap();
        view
    });
    for (img, (rank, ws, counters, log, cache, blob)) in images.iter().zip(out.ranks) {
        assert_eq!(rank, img.rank);
        assert_eq!(ws, img.world_size);
        assert_eq!(counters, img.counters);
        assert_eq!(log, img.replay_log);
        assert_eq!(cache, img.cache);
        assert_eq!(blob, img.app_blob);
    }
    assert_eq!(images[1].cache.len(), 2, "both sends were in flight at the cut");
}

fn restore_error(image: CheckpointImage) -> PluginError {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rank.img");
    write_image(&image, &path).unwrap();
    let cfg = LocalConfig::new(2, dir.path());
    let world = LocalWorld::start(&cfg).unwrap();
    let envs: Vec<LaunchEnv> = (0..2).map(|r| world.env(RankId(r)).clone()).collect();
    let restored = LaunchEnv::restored(envs[0].proxy_endpoint, &path);
    let other = envs[1].clone();
    let peer = thread::spawn(move || {
        let ctx = Context::init(&other, None);
        // Keep the world alive until the restored rank has failed.
        thread::sleep(Duration::from_millis(300));
        drop(ctx);
    });
    let err = Context::init(&restored, None).err().expect("restore must fail");
    peer.join().unwrap();
    err
}

#[test]
fn replay_divergence_names_the_entry() {
    let mut img = CheckpointImage::empty(RankId(0), 2);
    img.replay_log.push(ReplayLogEntry::Init { rank: RankId(0), world_size: 3 });
    img.world_size = 2;
    match restore_error(img) {
        PluginError::Restore { entry, .. } => assert_eq!(entry, 0),
        other => panic!("expected a replay divergence, got {other:?}"),
    }

    let mut img = CheckpointImage::empty(RankId(0), 2);
    img.replay_log.push(ReplayLogEntry::Init { rank: RankId(0), world_size: 2 });
    img.replay_log.push(ReplayLogEntry::CommQuery { query: CommQuery::Size, comm: 0, result: 5 });
    match restore_error(img) {
        PluginError::Restore { entry, .. } => assert_eq!(entry, 1),
        other => panic!("expected a replay divergence, got {other:?}"),
    }
}

#[test]
fn lost_rank_during_checkpoint_aborts_promptly() {
    let (_d, mut cfg) = world(2);
    cfg.phase_timeout = Duration::from_secs(2);
    let world = LocalWorld::start(&cfg).unwrap();
    let ep1 = world.env(RankId(1)).proxy_endpoint;
    let env0 = world.env(RankId(0)).clone().with_ckpt_after_call(Some(0));
    // Rank 1 speaks the plugin protocol by hand and vanishes as soon as
    // the checkpoint reaches it.
    let raw = thread::spawn(move || {
        let mut s = TcpStream::connect(ep1).unwrap();
        write_frame(&mut s, &Frame::Init { version: PROTOCOL_VERSION }).unwrap();
        assert!(matches!(read_frame(&mut s).unwrap(), Some(Frame::InitOk { .. })));
        loop {
            match read_frame(&mut s).unwrap() {
                Some(Frame::CkptPrepare { .. }) => break,
                Some(_) => continue,
                None => panic!("proxy closed first"),
            }
        }
        drop(s);
        Instant::now()
    });
    let rank0 = thread::spawn(move || {
        let mut ctx = Context::init(&env0, None)?;
        let w = ctx.comm_world();
        ctx.comm_size(w)?;
        ctx.finalize()
    });
    let lost_at = raw.join().unwrap();
    let r0 = rank0.join().unwrap();
    let done = Instant::now();
    let out = world.join(vec![r0]);
    assert!(done - lost_at < cfg.phase_timeout + Duration::from_secs(1));
    assert!(out.ranks[0].is_err(), "rank 0 cannot finish a world that lost a member");
    assert!(matches!(out.coordinator, Err(CoordinatorError::RankLost(RankId(1)))));
}

#[test]
fn silent_rank_times_out_and_the_world_resumes() {
    let (_d, mut cfg) = world(2);
    cfg.phase_timeout = Duration::from_millis(800);
    let world = LocalWorld::start(&cfg).unwrap();
    let addr = world.coordinator_addr();
    let ep1 = world.env(RankId(1)).proxy_endpoint;
    let env0 = world.env(RankId(0)).clone();
    // Rank 1 is stuck in computation: it joined but makes no calls.
    let (tx, rx) = std::sync::mpsc::channel::<()>();
    let (ready_tx, ready) = std::sync::mpsc::channel::<()>();
    let ready0 = ready_tx.clone();
    let raw = thread::spawn(move || {
        let mut ctx = Context::init(&LaunchEnv::fresh(ep1), None).unwrap();
        ready_tx.send(()).unwrap();
        rx.recv().unwrap();
        ctx.finalize().unwrap();
    });
    let rank0 = thread::spawn(move || {
        let mut ctx = Context::init(&env0, None).unwrap();
        ready0.send(()).unwrap();
        ctx.finalize().unwrap();
    });
    ready.recv().unwrap();
    ready.recv().unwrap();
    let started = Instant::now();
    let outcome = pmpcr::launcher::control::checkpoint_now(addr).unwrap();
    let took = started.elapsed();
    assert!(matches!(outcome, CkptOutcome::Aborted(_)), "{outcome:?}");
    assert!(took >= cfg.phase_timeout && took < cfg.phase_timeout + Duration::from_secs(2), "{took:?}");
    tx.send(()).unwrap();
    raw.join().unwrap();
    rank0.join().unwrap();
    let out = world.join(vec![()]);
    let report = out.coordinator.unwrap();
    assert!(report.checkpoints.is_empty());
    assert_eq!(report.aborted.len(), 1);
}

#[test]
fn operator_checkpoint_of_a_running_world() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = LocalConfig::new(2, dir.path());
    cfg.forward_delay = Duration::from_millis(2);
    let world = LocalWorld::start(&cfg).unwrap();
    let addr = world.coordinator_addr();
    let mut rng = StdRng::seed_from_u64(7);
    let mut plans = fifo_plans(&mut rng, 300);
    for p in plans.iter_mut() {
        for op in p.iter_mut() {
            if let Op::Compute { micros } = op {
                *micros += 2000;
            }
        }
    }
    let plans = Arc::new(plans);
    let runner = thread::spawn(move || run_traffic(world, plans));
    thread::sleep(Duration::from_millis(100));
    let outcome = pmpcr::launcher::control::checkpoint_now(addr).unwrap();
    let out = runner.join().unwrap();
    let finals: Vec<Traffic> = out.ranks.into_iter().map(Result::unwrap).collect();
    assert_eq!(finals[1].disorder, None);
    match outcome {
        CkptOutcome::Done { epoch, manifest, drain } => {
            assert_eq!(epoch, 1);
            assert!(drain.rounds >= 2);
            assert_eq!(audit_cut(&manifest).unwrap().in_flight, 0);
        }
        other => panic!("checkpoint failed: {other:?}"),
    }
}

#[test]
fn checkpoint_reaching_a_rank_that_is_still_joining() {
    let (_d, mut cfg) = world(3);
    cfg.ckpt_after_call = Some(0);
    let world = LocalWorld::start(&cfg).unwrap();
    let envs: Vec<LaunchEnv> = (0..3).map(|r| world.env(RankId(r)).clone()).collect();
    // Rank 2 connects only after rank 0 has asked for the checkpoint.
    let ranks: Vec<_> = envs
        .into_iter()
        .enumerate()
        .map(|(r, env)| {
            thread::spawn(move || {
                if r == 2 {
                    thread::sleep(Duration::from_millis(300));
                }
                let mut ctx = Context::init(&env, None)?;
                let w = ctx.comm_world();
                let size = ctx.comm_size(w)?;
                ctx.finalize()?;
                Ok::<_, PluginError>(size)
            })
        })
        .collect();
    let results: Vec<_> = ranks.into_iter().map(|h| h.join().unwrap()).collect();
    let out = world.join(results);
    assert!(out.ranks.iter().all(|r| matches!(r, Ok(3))), "{:?}", out.ranks);
    assert_eq!(out.coordinator.unwrap().checkpoints.len(), 1);
}
