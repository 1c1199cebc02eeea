//! Shows how a training window is rearranged and which positions are scored.

use agr_lab::permute::{block_swap_permute, loss_mask, make_batch, Objective, PermutationConfig};

fn main() -> agr_lab::Result<()> {
    let window: Vec<u32> = (0..13).collect();
    for l in [2, 3, 4] {
        println!("l = {l}: {:?}", block_swap_permute(&window, l)?);
    }

    let mask: String = loss_mask(16, 4).iter().map(|&m| if m { '#' } else { '.' }).collect();
    println!("scored positions for T = 16, l = 4: {mask}");

    let text: Vec<u32> = (100..140).collect();
    let cfg = PermutationConfig::new(4, 8)?;
    for objective in [Objective::NextToken, Objective::SecondToLast] {
        let b = make_batch(&text, &[0], cfg, objective)?;
        println!("{}: masked fraction {}", objective.tag(), b.masked_fraction());
        println!("{b:?}");
    }
    Ok(())
}
