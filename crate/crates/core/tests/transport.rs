use std::net::TcpListener;
use std::time::Duration;

use fedgrid::config::MmgConfig;
use fedgrid::federation::{initial_global, run_training, FedError, FedSchedule, Participant, WeightMode};
use fedgrid::scenario::default_scenario;
use fedgrid::transport::{join, run_training_loopback, serve, ServerConfig};

fn short_config() -> MmgConfig {
    MmgConfig {
        schedule: FedSchedule { total_epochs: 40, local_epochs: 20, weights: WeightMode::Uniform },
        eval_every: 5,
        ..Default::default()
    }
}

#[test]
fn tcp_reproduces_inproc_bitwise() {
    let cfg = short_config();
    let day = default_scenario();
    let a = run_training(&cfg, &day, 42).unwrap();
    let b = run_training_loopback(&cfg, &day, 42).unwrap();
    assert_eq!(a.globals.len(), 2);
    assert_eq!(a.globals, b.globals);
    for (x, y) in a.participants.iter().zip(&b.participants) {
        assert_eq!(x.agent.param_vector(), y.agent.param_vector());
        assert_eq!(x.history, y.history);
    }
    for (x, y) in a.reports.iter().zip(&b.reports) {
        assert_eq!((x.round, &x.pre_eval, &x.post_eval, &x.agent_norms), (y.round, &y.pre_eval, &y.post_eval, &y.agent_norms));
        assert_eq!((x.global_norm, &x.epochs_completed), (y.global_norm, &y.epochs_completed));
    }
}

#[test]
fn mismatched_spec_is_rejected() {
    let cfg = short_config();
    let day = default_scenario();
    let init = initial_global(&cfg, &day, 1).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_cfg =
        ServerConfig { n_participants: 1, rounds: 1, weights: WeightMode::Uniform, initial: init, timeout: Duration::from_secs(2) };

    let mut other = cfg.clone();
    other.ppo.hidden = vec![8];
    let other_init = initial_global(&other, &day, 1).unwrap();
    let mut p = Participant::new(&other, &day, 0, &other_init, 1).unwrap();

    std::thread::scope(|s| {
        let server = s.spawn(|| serve(&listener, &server_cfg));
        let res = join(addr, &mut p, &other.schedule, Duration::from_secs(2));
        assert!(matches!(res, Err(FedError::Rejected(_))), "{res:?}");
        // the server keeps waiting for a valid participant and then times out
        assert!(matches!(server.join().unwrap(), Err(FedError::Timeout(_))));
    });
}

#[test]
fn missing_participant_times_out() {
    let mut cfg = short_config();
    cfg.schedule = FedSchedule { total_epochs: 2, local_epochs: 1, weights: WeightMode::Uniform };
    let day = default_scenario();
    let init = initial_global(&cfg, &day, 3).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_cfg = ServerConfig {
        n_participants: 3,
        rounds: 2,
        weights: WeightMode::Uniform,
        initial: init.clone(),
        timeout: Duration::from_millis(500),
    };
    let mut ps: Vec<Participant> = (0..2).map(|j| Participant::new(&cfg, &day, j, &init, 3).unwrap()).collect();
    std::thread::scope(|s| {
        let server = s.spawn(|| serve(&listener, &server_cfg));
        let clients: Vec<_> =
            ps.iter_mut().map(|p| s.spawn(|| join(addr, p, &cfg.schedule, Duration::from_secs(2)))).collect();
        let err = server.join().unwrap().unwrap_err();
        assert!(matches!(&err, FedError::Timeout(m) if m.contains("2 of 3")), "{err}");
        for c in clients {
            assert!(c.join().unwrap().is_err());
        }
    });
}

#[test]
fn loopback_refuses_local_only() {
    let mut cfg = short_config();
    cfg.local_only = true;
    assert!(run_training_loopback(&cfg, &default_scenario(), 1).is_err());
}
