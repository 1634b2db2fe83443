#![no_main]

use fluency::corpus::PhoneInventory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(inv) = PhoneInventory::parse(data) {
        assert_eq!(PhoneInventory::parse(&inv.to_text()).unwrap(), inv);
    }
});
