#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = tdp::numerics::Checkpoint::decode(data) {
        let again = tdp::numerics::Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(again.encode(), ck.encode());
        let _ = tdp::training::TdpModels::from_checkpoint(&ck);
    }
});
