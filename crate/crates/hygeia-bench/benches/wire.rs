use criterion::{black_box, criterion_group, criterion_main, Criterion};

use hygeia::provider::{encode_case_list, generate_synthetic};
use hygeia::{Envelope, Payload};

fn codes(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn bench_envelope_round_trip(c: &mut Criterion) {
    let records = generate_synthetic(
        42,
        200,
        "H1",
        &codes(&["GA", "AS", "WR", "NR"]),
        &codes(&["A00", "J10", "U07"]),
        &codes(&["T1", "T2", "T3"]),
        &codes(&["D1", "D2"]),
    )
    .unwrap();
    let envelope = Envelope {
        message_id: "8a9f1c3e-4b2d-4f6a-9c1e-2d3f4a5b6c7d".into(),
        correlation_id: "8a9f1c3e-4b2d-4f6a-9c1e-2d3f4a5b6c7d".into(),
        service: "hospital.records".into(),
        operation: "FindCases".into(),
        timestamp: "2024-05-01T12:00:00Z".into(),
        reply_to: None,
        body: Payload::Content(encode_case_list(&records)),
    };
    let bytes = envelope.serialize().unwrap();

    c.bench_function("envelope_serialize_200_records", |b| {
        b.iter(|| black_box(&envelope).serialize().unwrap())
    });
    c.bench_function("envelope_parse_200_records", |b| {
        b.iter(|| Envelope::parse(black_box(&bytes)).unwrap())
    });
}

fn bench_generator(c: &mut Criterion) {
    c.bench_function("generate_synthetic_1000", |b| {
        b.iter(|| {
            generate_synthetic(
                black_box(42),
                1000,
                "H1",
                &codes(&["GA", "AS", "WR", "NR"]),
                &codes(&["A00", "J10", "U07"]),
                &codes(&["T1", "T2", "T3"]),
                &codes(&["D1", "D2"]),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, bench_envelope_round_trip, bench_generator);
criterion_main!(benches);
