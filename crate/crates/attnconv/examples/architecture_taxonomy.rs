//! Places attention and dynamic convolutions in one taxonomy: kernel bank,
//! selection rule, kernel type and generator cost.

use attnconv::conv::Architecture;

fn main() {
    let (c, c_in, c_out) = (384, 384, 384);
    println!("{:<18} {:<9} {:<10} {:<11} {:<6} {:>14}", "", "bank", "selection", "kernel", "size", "generator");
    for arch in Architecture::ALL {
        let ch = arch.characterize();
        println!(
            "{:<18} {:<9} {:<10} {:<11} {:<6} {:>14}",
            arch.name(),
            format!("{:?}", ch.bank),
            format!("{:?}", ch.selection),
            ch.kernel_type,
            format!("{}x{}", ch.kernel_size.0, ch.kernel_size.1),
            arch.generator_params(c, c_in, c_out)
        );
    }
}
