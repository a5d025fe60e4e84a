#![no_main]

use dnpr_core::lzmodel::RateCurve;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(curve) = RateCurve::from_csv_reader(data) {
        let again = RateCurve::from_csv(&curve.to_csv()).expect("written curve re-parses");
        assert_eq!(again.len(), curve.len());
    }
});
