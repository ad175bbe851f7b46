//! DNS side: parse answer lines, keep valid responses, and fill the store.

use std::sync::Arc;

use crate::io::{parse_field, split_fields, ParseError, ParseErrorKind};
use crate::model::{normalize_answer, normalize_name, Clock, DnsRecord, RecordType};
use crate::queue::Consumer;
use crate::store::MapStore;

/// Parses `ts \t rtype \t qname \t ttl \t answer`.
///
/// Only the line shape is checked here; [`filter_valid_response`] decides
/// whether the record is usable.
pub fn parse_dns_line(line: &str, line_no: u64) -> Result<DnsRecord, ParseError> {
    let f = split_fields(line, 5, line_no)?;
    let rtype: RecordType = f[1].trim().parse().map_err(|_| {
        ParseError::new(
            line_no,
            ParseErrorKind::InvalidField {
                field: "rtype",
                value: f[1].to_string(),
            },
        )
    })?;
    Ok(DnsRecord {
        ts: parse_field(f[0], "ts", line_no)?,
        rtype,
        qname: normalize_name(f[2].trim()),
        ttl: parse_field(f[3], "ttl", line_no)?,
        answer: normalize_answer(rtype, f[4].trim()),
    })
}

/// True for A/AAAA/CNAME answers whose fields are non-empty and whose
/// address matches the record family.
pub fn filter_valid_response(rec: &DnsRecord) -> bool {
    rec.rtype != RecordType::Other && rec.validate().is_ok()
}

/// Fills `store` from `queue` until every producer is gone and the queue is
/// drained.
pub fn fill_up_worker(queue: Consumer<DnsRecord>, store: Arc<MapStore>, clock: Clock) {
    while let Some(rec) = queue.recv() {
        store.fill_at(&rec, clock.now(rec.ts));
        queue.complete(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EngineConfig;
    use crate::queue;
    use std::net::IpAddr;

    #[test]
    fn parses_address_and_alias_lines() {
        assert_eq!(
            parse_dns_line("1000\tA\tedge.cdn.net\t60\t10.0.0.1", 1).unwrap(),
            DnsRecord::a(1000, "edge.cdn.net", 60, "10.0.0.1").unwrap()
        );
        let rec = parse_dns_line("1000\tCNAME\twww.svc.com\t300\tedge.cdn.net", 1).unwrap();
        assert_eq!(rec.rtype, RecordType::Cname);
        assert_eq!(rec, DnsRecord::cname(1000, "www.svc.com", 300, "edge.cdn.net").unwrap());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_dns_line("1000\tA\tx", 7).unwrap_err();
        assert_eq!(err.line, 7);
        assert_eq!(err.kind, ParseErrorKind::FieldCount { expected: 5, found: 3 });
        for bad in [
            "x\tA\tn\t60\t10.0.0.1",
            "1\tA\tn\t-5\t10.0.0.1",
            "1\t\tn\t60\t10.0.0.1",
            "1\tA?\tn\t60\t10.0.0.1",
        ] {
            assert!(matches!(
                parse_dns_line(bad, 2).unwrap_err().kind,
                ParseErrorKind::InvalidField { .. }
            ));
        }
    }

    #[test]
    fn filter_checks_type_consistency() {
        let parse = |l: &str| parse_dns_line(l, 1).unwrap();
        assert!(filter_valid_response(&parse("1\tA\tx.com\t60\t10.0.0.1")));
        assert!(!filter_valid_response(&parse("1\tA\tx.com\t60\tnot-an-ip")));
        assert!(!filter_valid_response(&parse("1\tMX\tx.com\t60\tmail.x.com")));
        assert!(!filter_valid_response(&parse("1\tCNAME\tx.com\t60\t")));
        assert!(filter_valid_response(&parse("1\tAAAA\tx.com\t60\t2001:db8::1")));
    }

    #[test]
    fn filter_agrees_with_ip_parsing_oracle() {
        // Independent check: the std address parser decides the family.
        let answers = ["10.0.0.1", "2001:db8::1", "::ffff:10.0.0.1", "256.1.1.1", "x", "1.2.3"];
        for rtype in ["A", "AAAA"] {
            for ans in answers {
                let rec = parse_dns_line(&format!("1\t{rtype}\tx.com\t60\t{ans}"), 1).unwrap();
                let expected = matches!(
                    (rtype, ans.parse::<IpAddr>()),
                    ("A", Ok(IpAddr::V4(_))) | ("AAAA", Ok(IpAddr::V6(_)))
                );
                assert_eq!(filter_valid_response(&rec), expected, "{rtype} {ans}");
            }
        }
    }

    fn run_workers(workers: usize, records: Vec<DnsRecord>) -> Arc<MapStore> {
        let cfg = EngineConfig::with_variant(crate::model::Variant::NoClearUp);
        let store = Arc::new(MapStore::new(&cfg));
        let (tx, rx) = queue::bounded(records.len().max(1));
        for r in records {
            assert!(tx.try_push(r));
        }
        drop(tx);
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let rx = rx.clone();
                let store = Arc::clone(&store);
                std::thread::spawn(move || fill_up_worker(rx, store, Clock::RecordTime))
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(rx.stats().is_idle());
        store
    }

    fn distinct(n: u32) -> Vec<DnsRecord> {
        (0..n)
            .map(|i| {
                let ip = std::net::Ipv4Addr::from(0x0a00_0000 + i).to_string();
                DnsRecord::a(u64::from(i), &format!("h{i}.net"), 60, &ip).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_worker_fills_each_record() {
        let store = run_workers(1, distinct(3));
        assert_eq!(store.entry_count(), 3);
    }

    #[test]
    fn parallel_workers_match_single_threaded_contents() {
        let many = run_workers(4, distinct(10_000));
        assert_eq!(many.entry_count(), 10_000);
        let one = run_workers(1, distinct(10_000));
        assert_eq!(many.ip_name().snapshot(), one.ip_name().snapshot());
    }
}
