use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use sb_core::bus::{Bus, FaultCode, Handled, ServiceDescriptor};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy)]
enum Op {
    Ok,
    Fail,
    Panic,
    Missing,
    Ghost,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![4 => Just(Op::Ok), 1 => Just(Op::Fail), 1 => Just(Op::Panic), 1 => Just(Op::Missing), 1 => Just(Op::Ghost)]
}

fn quiet_panics() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| std::panic::set_hook(Box::new(|_| {})));
}

fn echo(bus: &Bus) -> sb_core::bus::Registration {
    bus.register(ServiceDescriptor::new("echo", ["ok", "fail", "panic"]), |_, env| match env.operation.as_str() {
        "ok" => Ok(Handled::Reply(env.payload.clone())),
        "fail" => Err(format!("refused {}", env.payload)),
        _ => panic!("handler bug"),
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_request_has_one_correlated_outcome(ops in prop::collection::vec((op(), 1u64..20), 1..80)) {
        quiet_panics();
        let bus = Bus::new();
        let _echo = echo(&bus);
        let tickets: Vec<_> = ops
            .iter()
            .enumerate()
            .map(|(i, (op, timeout))| {
                let (svc, name) = match op {
                    Op::Ok => ("echo", "ok"),
                    Op::Fail => ("echo", "fail"),
                    Op::Panic => ("echo", "panic"),
                    Op::Missing => ("echo", "nope"),
                    Op::Ghost => ("ghost", "ok"),
                };
                (bus.request(svc, name, json!(i), *timeout).unwrap(), *op, i)
            })
            .collect();
        bus.advance(25);
        prop_assert_eq!(bus.outstanding(), 0);
        for (t, op, i) in &tickets {
            let reply = bus.take(t).expect("one outcome");
            prop_assert!(bus.take(t).is_none());
            prop_assert_eq!(reply.correlation_id, t.0);
            let code = reply.result.as_ref().err().map(|f| f.code);
            match op {
                Op::Ok => prop_assert_eq!(reply.result, Ok(json!(i))),
                Op::Fail | Op::Panic => prop_assert_eq!(code, Some(FaultCode::HandlerFault)),
                Op::Missing => prop_assert_eq!(code, Some(FaultCode::OperationNotFound)),
                Op::Ghost => prop_assert_eq!(code, Some(FaultCode::ServiceNotFound)),
            }
        }
    }

    #[test]
    fn faults_do_not_disturb_later_requests(ops in prop::collection::vec(op(), 1..60)) {
        quiet_panics();
        let bus = Bus::new();
        let _echo = echo(&bus);
        for (i, op) in ops.iter().enumerate() {
            let name = match op {
                Op::Fail => "fail",
                Op::Panic => "panic",
                _ => "ok",
            };
            let _ = bus.call("echo", name, json!(i), 5);
            prop_assert!(bus.descriptor("echo").is_some());
            prop_assert_eq!(bus.call("echo", "ok", json!({"after": i}), 5), Ok(json!({"after": i})));
        }
    }

    #[test]
    fn each_sender_is_delivered_in_order(senders in 1usize..5, per in 1usize..60) {
        let bus = Bus::new();
        let seen = Arc::new(Mutex::new(Vec::<(u64, u64)>::new()));
        let log = Arc::clone(&seen);
        let _sink = bus
            .register(ServiceDescriptor::new("sink", ["put"]), move |_, env| {
                let p = &env.payload;
                log.lock().unwrap().push((p["s"].as_u64().unwrap(), p["i"].as_u64().unwrap()));
                Ok(Handled::Reply(Value::Null))
            })
            .unwrap();
        let topic_seen = Arc::new(Mutex::new(Vec::<(u64, u64)>::new()));
        let tlog = Arc::clone(&topic_seen);
        let _sub = bus.subscribe("feed.*", move |_, env| {
            tlog.lock().unwrap().push((env.payload["s"].as_u64().unwrap(), env.payload["i"].as_u64().unwrap()));
        });
        std::thread::scope(|scope| {
            for s in 0..senders {
                let bus = bus.clone();
                scope.spawn(move || {
                    for i in 0..per {
                        let p = json!({"s": s, "i": i});
                        bus.notify("sink", "put", p.clone());
                        bus.publish(&format!("feed.{s}"), p);
                    }
                });
            }
        });
        for log in [&seen, &topic_seen] {
            let got = log.lock().unwrap().clone();
            prop_assert_eq!(got.len(), senders * per);
            for s in 0..senders as u64 {
                let order: Vec<u64> = got.iter().filter(|(x, _)| *x == s).map(|(_, i)| *i).collect();
                prop_assert_eq!(order, (0..per as u64).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn nothing_arrives_after_unregister(before in 0usize..20, after in 1usize..20) {
        let bus = Bus::new();
        let calls = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&calls);
        let reg = bus
            .register(ServiceDescriptor::new("svc", ["hit"]), move |_, _| {
                c.fetch_add(1, Ordering::SeqCst);
                Ok(Handled::Reply(Value::Null))
            })
            .unwrap();
        let heard = Arc::new(AtomicUsize::new(0));
        let h = Arc::clone(&heard);
        let sub = bus.subscribe("t", move |_, _| {
            h.fetch_add(1, Ordering::SeqCst);
        });
        for _ in 0..before {
            bus.notify("svc", "hit", Value::Null);
            bus.publish("t", Value::Null);
        }
        prop_assert_eq!(calls.load(Ordering::SeqCst), before);
        prop_assert_eq!(heard.load(Ordering::SeqCst), before);
        drop(reg);
        drop(sub);
        for _ in 0..after {
            bus.notify("svc", "hit", Value::Null);
            prop_assert_eq!(bus.publish("t", Value::Null), 0);
            let fault = bus.call("svc", "hit", Value::Null, 3).unwrap_err();
            prop_assert_eq!(fault.code, FaultCode::ServiceNotFound);
        }
        prop_assert_eq!(calls.load(Ordering::SeqCst), before);
        prop_assert_eq!(heard.load(Ordering::SeqCst), before);
        prop_assert!(bus.descriptor("svc").is_none());
    }
}
