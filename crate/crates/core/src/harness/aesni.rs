//! AES-128 victim that keeps its whole key schedule in XMM registers.
//!
//! Blocks and keys are written as in the AES standard, byte 0 first. In a
//! register the block occupies the low 128 bits in little-endian order, so
//! byte 0 is the least significant byte.

use crate::isa::{Instruction, Program, ProgramBuilder, SimdReg, SimdValue};
use crate::machine::aes::{aes_round, SBOX};

pub type Block = [u8; 16];

/// Register holding the data block; xmm0-xmm10 hold the round keys.
pub const DATA_REGISTER: u8 = 15;

/// Plaintext of the standard's worked example.
pub const EXAMPLE_PLAINTEXT: Block = [
    0x32, 0x43, 0xf6, 0xa8, 0x88, 0x5a, 0x30, 0x8d, 0x31, 0x31, 0x98, 0xa2, 0xe0, 0x37, 0x07, 0x34,
];

/// Parses 32 hex digits into a block, first byte first.
pub fn parse_block(hex: &str) -> Option<Block> {
    let hex = hex.trim();
    let hex = hex
        .strip_prefix("0x")
        .or_else(|| hex.strip_prefix("0X"))
        .unwrap_or(hex);
    if hex.len() != 32 {
        return None;
    }
    u128::from_str_radix(hex, 16).ok().map(u128::to_be_bytes)
}

pub fn block_hex(block: &Block) -> String {
    block.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn block_to_register(block: &Block) -> SimdValue {
    SimdValue::from_le_bytes_128(*block)
}

pub fn register_to_block(value: &SimdValue) -> Block {
    value.low_u128().to_le_bytes()
}

/// AES-128 key schedule: the cipher key followed by ten round keys.
pub fn expand_key(key: &Block) -> [Block; 11] {
    let mut words = [[0u8; 4]; 44];
    for (i, word) in words.iter_mut().take(4).enumerate() {
        word.copy_from_slice(&key[4 * i..4 * i + 4]);
    }
    let mut rcon = 1u8;
    for i in 4..44 {
        let mut temp = words[i - 1];
        if i % 4 == 0 {
            temp.rotate_left(1);
            for b in &mut temp {
                *b = SBOX[*b as usize];
            }
            temp[0] ^= rcon;
            rcon = (rcon << 1) ^ if rcon & 0x80 != 0 { 0x1b } else { 0 };
        }
        for j in 0..4 {
            words[i][j] = words[i - 4][j] ^ temp[j];
        }
    }
    std::array::from_fn(|round| {
        let mut block = [0u8; 16];
        for c in 0..4 {
            block[4 * c..4 * c + 4].copy_from_slice(&words[4 * round + c]);
        }
        block
    })
}

/// Reference encryption with the same round primitive the machine uses.
pub fn encrypt(key: &Block, plaintext: &Block) -> Block {
    let schedule = expand_key(key);
    let rk = |i: usize| u128::from_le_bytes(schedule[i]);
    let mut state = u128::from_le_bytes(*plaintext) ^ rk(0);
    for round in 1..10 {
        state = aes_round(state, rk(round), false);
    }
    aes_round(state, rk(10), true).to_le_bytes()
}

/// Loads the schedule of `key` into xmm0-xmm10 and `plaintext` into xmm15,
/// encrypts it with the standard AES-NI sequence, then yields.
pub fn make_aesni_victim(key: &Block, plaintext: &Block) -> Program {
    let mut b = ProgramBuilder::new();
    for (i, round_key) in expand_key(key).iter().enumerate() {
        b.push(Instruction::MovSimdImm {
            dst: SimdReg::xmm(i as u8),
            value: block_to_register(round_key),
        });
    }
    let data = SimdReg::xmm(DATA_REGISTER);
    b.push(Instruction::MovSimdImm {
        dst: data,
        value: block_to_register(plaintext),
    });
    b.push(Instruction::Pxor {
        dst: data,
        src: SimdReg::xmm(0),
    });
    for round in 1..10 {
        b.push(Instruction::Aesenc {
            dst: data,
            src: SimdReg::xmm(round),
        });
    }
    b.push(Instruction::Aesenclast {
        dst: data,
        src: SimdReg::xmm(10),
    });
    b.push(Instruction::Yield);
    b.build().expect("victim has no labels")
}
