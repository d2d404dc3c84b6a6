use fibersim_core::tensor_io::{checksum, generate, GenSpec};

// Reference values from an independent reimplementation of the sampler.
const TABLE: &str = include_str!("fixtures/generator.csv");

#[test]
fn generator_matches_reference_table() {
    let mut rows = 0;
    for line in TABLE.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let shape: Vec<usize> = f[0].split('x').map(|s| s.parse().unwrap()).collect();
        let names: Vec<String> = (0..shape.len()).map(|i| format!("R{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let g = GenSpec::new(shape, f[1].parse().unwrap(), f[2].parse().unwrap());
        let t = generate(&g, "A", &names).unwrap();
        assert_eq!(t.nnz(), f[3].parse::<usize>().unwrap(), "{line}");
        let (p, v) = &t.points()[0];
        let first = p
            .iter()
            .map(|c| c.components()[0].to_string())
            .collect::<Vec<_>>()
            .join("x");
        assert_eq!(format!("{first}={v}"), f[4], "{line}");
        assert_eq!(checksum(&t), f[5].parse::<u64>().unwrap(), "{line}");
        rows += 1;
    }
    assert_eq!(rows, 8);
}
