//! Parse coefficient expressions, evaluate them and inspect parse errors.

use noarb::expr::parse;

fn main() {
    for src in [
        "x^1.5",
        "0.5*x + sqrt(x)",
        "exp(-x^2/2) / sqrt(2*pi)",
        "min(x, 1) * abs(x - 2)",
    ] {
        let e = parse(src).expect("valid expression");
        let ys: Vec<String> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&x| format!("{:.6}", e.eval(x).unwrap()))
            .collect();
        println!("{src:<28} at 0.5, 1, 2: {}", ys.join(", "));
    }

    for bad in ["x^^2", "sin(x", "foo(x)", "1 +"] {
        match parse(bad) {
            Ok(e) => println!("{bad:<28} unexpectedly parsed as {e:?}"),
            Err(err) => println!("{bad:<28} error: {err}"),
        }
    }

    // evaluation errors are reported instead of returning NaN
    let e = parse("log(x)").unwrap();
    println!("log(x) at -1: {:?}", e.eval(-1.0));
}
